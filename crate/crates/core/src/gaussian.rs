//! Gaussian splats and the two managed sets that make up a map.

use std::collections::HashSet;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::ManageConfig;
use crate::error::{Error, Result};
use crate::geometry::quat_to_matrix;
use crate::motion::{eval_segment, MotionSpline};

/// Extent of the discarded (shortest) principal axis, meters.
pub const FLATTEN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaussianKind {
    Static,
    Dynamic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub id: u64,
    pub kind: GaussianKind,
    /// World-frame mean. Dynamic Gaussians keep this equal to `spline.m_plus`.
    pub mean: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    /// `sh[b]` is the RGB weight of basis `b`.
    pub sh: Vec<[f64; 3]>,
    pub spline: Option<MotionSpline>,
    pub v_prev_plus: Option<Vector3<f64>>,
    pub birth_frame: i64,
    pub last_observed_frame: i64,
    /// Consecutive frames in which a static Gaussian received no visible weight.
    #[serde(default)]
    pub unseen_frames: i64,
}

impl Gaussian {
    fn base(id: u64, kind: GaussianKind, mean: Vector3<f64>, birth_frame: i64) -> Self {
        Self {
            id,
            kind,
            mean,
            rotation: UnitQuaternion::identity(),
            log_scale: Vector3::repeat(0.01f64.ln()),
            opacity_logit: 0.0,
            sh: vec![[0.0; 3]],
            spline: None,
            v_prev_plus: None,
            birth_frame,
            last_observed_frame: birth_frame,
            unseen_frames: 0,
        }
    }

    /// A 1 cm gray splat; callers overwrite appearance and shape as needed.
    pub fn new_static(id: u64, mean: Vector3<f64>, birth_frame: i64) -> Self {
        Self::base(id, GaussianKind::Static, mean, birth_frame)
    }

    /// Like [`Gaussian::new_static`], with a stationary spline anchored at the
    /// birth frame.
    pub fn new_dynamic(id: u64, mean: Vector3<f64>, birth_frame: i64) -> Self {
        let mut g = Self::base(id, GaussianKind::Dynamic, mean, birth_frame);
        g.spline = Some(MotionSpline::stationary(mean, birth_frame));
        g
    }

    #[inline]
    pub fn is_dynamic(&self) -> bool {
        self.kind == GaussianKind::Dynamic
    }

    #[inline]
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    #[inline]
    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        build_covariance(&self.rotation, &self.log_scale)
    }

    /// World position of the mean at frame time `tau`. Static Gaussians and
    /// dynamic ones without a spline sit at `mean`.
    #[inline]
    pub fn position_at(&self, tau: f64) -> Vector3<f64> {
        match (&self.kind, &self.spline) {
            (GaussianKind::Dynamic, Some(s)) => eval_segment(s, tau),
            _ => self.mean,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.iter().flatten().all(|v| v.is_finite())
            && self.spline.as_ref().is_none_or(MotionSpline::is_finite)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Index of the axis that gets flattened: the smallest scale, ties going to
/// the highest index.
#[inline]
pub fn flattened_axis(log_scale: &Vector3<f64>) -> usize {
    let mut k = 2;
    for i in (0..2).rev() {
        if log_scale[i] < log_scale[k] {
            k = i;
        }
    }
    k
}

/// Per-axis standard deviations after flattening, plus the flattened axis.
#[inline]
pub(crate) fn effective_scales(log_scale: &Vector3<f64>) -> ([f64; 3], usize) {
    let k = flattened_axis(log_scale);
    let mut s = [log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp()];
    s[k] = FLATTEN_EPS;
    (s, k)
}

/// `R diag(s^2) R^T` from precomputed pieces. Entry `(i, j)` and `(j, i)` use
/// the same operation order so the result is exactly symmetric.
#[inline]
pub(crate) fn covariance_from_parts(r: &Matrix3<f64>, s: &[f64; 3]) -> Matrix3<f64> {
    let s2 = [s[0] * s[0], s[1] * s[1], s[2] * s[2]];
    let mut c = Matrix3::zeros();
    for i in 0..3 {
        for j in i..3 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += (r[(i, k)] * r[(j, k)]) * s2[k];
            }
            c[(i, j)] = acc;
            c[(j, i)] = acc;
        }
    }
    c
}

/// World covariance of a flattened Gaussian.
pub fn build_covariance(rotation: &UnitQuaternion<f64>, log_scale: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if !rotation.coords.iter().chain(log_scale.iter()).all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite rotation or log-scale".into()));
    }
    let (s, _) = effective_scales(log_scale);
    Ok(covariance_from_parts(&quat_to_matrix(rotation), &s))
}

/// The static and dynamic splat sets plus bookkeeping shared by the stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMap {
    pub static_set: Vec<Gaussian>,
    pub dynamic_set: Vec<Gaussian>,
    /// Most recently processed frame, `-1` before the first frame.
    pub frame_index: i64,
    pub config: ManageConfig,
    pub next_id: u64,
}

impl GaussianMap {
    pub fn new(config: ManageConfig) -> Self {
        Self {
            static_set: Vec::new(),
            dynamic_set: Vec::new(),
            frame_index: -1,
            config,
            next_id: 0,
        }
    }

    pub fn alloc_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn len(&self) -> usize {
        self.static_set.len() + self.dynamic_set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Gaussian> {
        self.static_set.iter().chain(self.dynamic_set.iter())
    }

    /// Checks the structural invariants that every stage must preserve.
    pub fn check_invariants(&self) -> Result<()> {
        let mut ids = HashSet::with_capacity(self.len());
        for g in self.iter() {
            if !ids.insert(g.id) {
                return Err(Error::ContractViolation(format!("duplicate gaussian id {}", g.id)));
            }
            if g.id >= self.next_id {
                return Err(Error::ContractViolation(format!(
                    "gaussian id {} not below next_id {}",
                    g.id, self.next_id
                )));
            }
            if (g.rotation.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::ContractViolation(format!(
                    "gaussian {} quaternion norm {}",
                    g.id,
                    g.rotation.norm()
                )));
            }
            if !g.is_finite() {
                return Err(Error::ContractViolation(format!("gaussian {} has non-finite state", g.id)));
            }
        }
        for g in &self.static_set {
            if g.is_dynamic() {
                return Err(Error::ContractViolation(format!("dynamic gaussian {} in static set", g.id)));
            }
        }
        for g in &self.dynamic_set {
            let Some(s) = g.spline.as_ref().filter(|_| g.is_dynamic()) else {
                return Err(Error::ContractViolation(format!(
                    "gaussian {} in dynamic set lacks a spline",
                    g.id
                )));
            };
            if g.mean != s.m_plus {
                return Err(Error::ContractViolation(format!(
                    "gaussian {} mean differs from spline endpoint",
                    g.id
                )));
            }
        }
        if self.dynamic_set.len() > self.config.dyna_budget {
            return Err(Error::ContractViolation(format!(
                "{} dynamic gaussians exceed budget {}",
                self.dynamic_set.len(),
                self.config.dyna_budget
            )));
        }
        Ok(())
    }
}
