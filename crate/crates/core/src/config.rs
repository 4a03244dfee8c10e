//! Mapping configuration. The JSON form mirrors the struct field-for-field;
//! every field is optional with the defaults below, and unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMode {
    /// Linearized lifting: `D_t K^-1 f` minus the ego displacement of the point.
    Linearized,
    /// Backproject both endpoints of the flow vector and difference them.
    ExactCorrespondence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Step sizes for one Gaussian set. `geometry` drives mean, rotation and
/// log-scale; `appearance` drives opacity and SH.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub geometry: f64,
    pub appearance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManageConfig {
    /// Association threshold as a ratio of the mean nearest-neighbor distance.
    pub lambda_d: f64,
    /// Blending-weight threshold for surface depth.
    pub lambda_alpha: f64,
    #[serde(rename = "dyna_longevity_W")]
    pub dyna_longevity_w: i64,
    #[serde(rename = "static_unseen_W")]
    pub static_unseen_w: i64,
    pub dyna_budget: usize,
    pub lr_static: LearningRates,
    pub lr_dynamic: LearningRates,
    pub iters_per_frame: usize,
    #[serde(rename = "window_K")]
    pub window_k: usize,
    pub sh_degree: u8,
    pub flow_mode: FlowMode,
    pub motion_threshold_px: f64,
    pub optimizer: OptimizerKind,
    /// Weight of the depth term in the total loss.
    pub depth_weight: f64,
    /// Every `keyframe_stride`-th frame enters the supervision window.
    pub keyframe_stride: i64,
    /// Upper bound on any activated scale, meters.
    pub scene_extent: f64,
    pub seed: u64,
}

impl Default for ManageConfig {
    fn default() -> Self {
        Self {
            lambda_d: 0.05,
            lambda_alpha: 0.1,
            dyna_longevity_w: 10,
            static_unseen_w: 30,
            dyna_budget: 50_000,
            lr_static: LearningRates {
                geometry: 2e-3,
                appearance: 5e-2,
            },
            lr_dynamic: LearningRates {
                geometry: 1e-2,
                appearance: 1e-1,
            },
            iters_per_frame: 50,
            window_k: 3,
            sh_degree: 1,
            flow_mode: FlowMode::ExactCorrespondence,
            motion_threshold_px: 1.0,
            optimizer: OptimizerKind::Adam,
            depth_weight: 0.5,
            keyframe_stride: 2,
            scene_extent: 5.0,
            seed: 0,
        }
    }
}

impl ManageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda_d >= 0.0) || !self.lambda_d.is_finite() {
            return bad(format!("lambda_d must be >= 0, got {}", self.lambda_d));
        }
        if !(self.lambda_alpha > 0.0 && self.lambda_alpha < 1.0) {
            return bad(format!("lambda_alpha must lie in (0, 1), got {}", self.lambda_alpha));
        }
        if self.dyna_budget < 1 {
            return bad("dyna_budget must be >= 1".into());
        }
        if self.iters_per_frame < 1 {
            return bad("iters_per_frame must be >= 1".into());
        }
        if !matches!(self.sh_degree, 0 | 1 | 3) {
            return bad(format!("sh_degree must be 0, 1 or 3, got {}", self.sh_degree));
        }
        if self.dyna_longevity_w < 0 || self.static_unseen_w < 1 {
            return bad("longevity windows must be non-negative (static_unseen_W >= 1)".into());
        }
        if self.keyframe_stride < 1 {
            return bad("keyframe_stride must be >= 1".into());
        }
        if !(self.motion_threshold_px >= 0.0) {
            return bad("motion_threshold_px must be >= 0".into());
        }
        if !(self.scene_extent > 0.0) {
            return bad("scene_extent must be positive".into());
        }
        for (name, lr) in [("lr_static", self.lr_static), ("lr_dynamic", self.lr_dynamic)] {
            if !(lr.geometry >= 0.0 && lr.appearance >= 0.0) {
                return bad(format!("{name} rates must be >= 0"));
            }
        }
        if !(self.depth_weight >= 0.0) {
            return bad("depth_weight must be >= 0".into());
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::from_json_str(&text).map_err(|e| Error::load(path, e.to_string()))
    }

    pub fn sh_basis_count(&self) -> usize {
        (self.sh_degree as usize + 1).pow(2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ManageConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_json_uses_defaults() {
        let cfg = ManageConfig::from_json_str(r#"{"lambda_d": 0.1, "dyna_longevity_W": 4}"#).unwrap();
        assert_eq!(cfg.lambda_d, 0.1);
        assert_eq!(cfg.dyna_longevity_w, 4);
        assert_eq!(cfg.dyna_budget, 50_000);
        assert_eq!(cfg.flow_mode, FlowMode::ExactCorrespondence);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ManageConfig::from_json_str(r#"{"lambda_dd": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("lambda_dd"));
    }

    #[test]
    fn invariants_enforced() {
        for bad in [
            r#"{"lambda_d": -1}"#,
            r#"{"lambda_alpha": 1.0}"#,
            r#"{"dyna_budget": 0}"#,
            r#"{"iters_per_frame": 0}"#,
            r#"{"sh_degree": 2}"#,
        ] {
            assert!(ManageConfig::from_json_str(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn json_roundtrip() {
        let cfg = ManageConfig {
            flow_mode: FlowMode::Linearized,
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"window_K\""));
        assert_eq!(ManageConfig::from_json_str(&text).unwrap(), cfg);
    }
}
