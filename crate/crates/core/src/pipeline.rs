//! Per-frame orchestration: segmentation and flow, dynamic and static
//! management, optimization, spline updates and metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{FlowMode, ManageConfig};
use crate::error::{Error, Result};
use crate::eval::{psnr, ssim};
use crate::flow::{backproject_points, lift_gs_flow, segment_motion, GsFlowField};
use crate::frame::FrameBundle;
use crate::gaussian::{Gaussian, GaussianMap};
use crate::geometry::CameraModel;
use crate::image::{Image, MaskImage, RgbImage};
use crate::manage::{
    apply_management, associate_dynamic_with, all_observed, manage_static, prune_dynamic, reuse_rate, FlowAssignment, MatchPolicy,
};
use crate::motion::update_spline_with_gap;
use crate::optim::{optimize_frame, OptimState};
use crate::render::{render, render_splats, RenderSettings};

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    /// Treat every pixel as static (the baseline without dynamic handling).
    pub no_dynamic: bool,
    pub match_policy: MatchPolicy,
    /// Keep the rendered RGB of every frame.
    pub keep_renders: bool,
    /// Record wall-clock time per frame (makes metrics non-reproducible).
    pub timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            no_dynamic: false,
            match_policy: MatchPolicy::ManyToOne,
            keep_renders: false,
            timing: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: i64,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR inside the motion mask; absent when the mask is empty or missing.
    pub dyna_psnr: Option<f64>,
    /// PSNR outside the motion mask.
    pub static_psnr: Option<f64>,
    pub n_static: usize,
    pub n_dynamic: usize,
    pub reuse_rate: f64,
    pub reused: usize,
    pub spawned: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ms_elapsed: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub dyna_psnr: Option<f64>,
    pub static_psnr: Option<f64>,
    pub final_n_static: usize,
    pub final_n_dynamic: usize,
    pub final_reuse_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_frame: Vec<FrameMetrics>,
    pub summary: Summary,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl Metrics {
    pub fn from_frames(per_frame: Vec<FrameMetrics>) -> Self {
        let last = per_frame.last();
        let summary = Summary {
            frames: per_frame.len(),
            psnr: mean_of(per_frame.iter().map(|m| m.psnr)).unwrap_or(0.0),
            ssim: mean_of(per_frame.iter().map(|m| m.ssim)).unwrap_or(0.0),
            dyna_psnr: mean_of(per_frame.iter().filter_map(|m| m.dyna_psnr)),
            static_psnr: mean_of(per_frame.iter().filter_map(|m| m.static_psnr)),
            final_n_static: last.map_or(0, |m| m.n_static),
            final_n_dynamic: last.map_or(0, |m| m.n_dynamic),
            final_reuse_rate: last.map_or(0.0, |m| m.reuse_rate),
        };
        Self { per_frame, summary }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// PSNR inside and outside `mask`, skipping empty sides.
pub fn split_psnr(pred: &RgbImage, gt: &RgbImage, mask: Option<&MaskImage>) -> Result<(Option<f64>, Option<f64>)> {
    let Some(m) = mask else {
        return Ok((None, Some(psnr(pred, gt, None)?)));
    };
    let inside = if m.count() > 0 { Some(psnr(pred, gt, Some(m))?) } else { None };
    let outside = if m.count() < m.len() {
        let inv = m.map(|v| !v);
        Some(psnr(pred, gt, Some(&inv))?)
    } else {
        None
    };
    Ok((inside, outside))
}

/// Incremental mapper holding the map, optimizer state and previous frame.
pub struct Mapper {
    pub cam: CameraModel,
    pub map: GaussianMap,
    pub optim: OptimState,
    pub options: RunOptions,
    /// Whether every surviving dynamic Gaussian had a transformed observed
    /// point within the association radius right after the last pruning.
    pub observability_after_prune: Option<bool>,
    prev: Option<FrameBundle>,
    warned_no_flow: bool,
}

impl Mapper {
    pub fn new(cam: CameraModel, config: ManageConfig, options: RunOptions) -> Result<Self> {
        config.validate()?;
        cam.validate()?;
        Ok(Self {
            cam,
            map: GaussianMap::new(config),
            optim: OptimState::new(),
            options,
            observability_after_prune: None,
            prev: None,
            warned_no_flow: false,
        })
    }

    fn settings(&self) -> RenderSettings {
        RenderSettings::with_lambda_alpha(self.map.config.lambda_alpha)
    }

    /// Renders the whole map at `pose` and frame time `tau`.
    pub fn render_at(&self, pose: &crate::geometry::Pose, tau: f64) -> Result<RgbImage> {
        Ok(render(&self.map, &self.cam, pose, tau, &self.settings())?.rgb)
    }

    /// Motion mask for management, or `None` when dynamic handling is off.
    fn management_mask(&mut self, frame: &FrameBundle) -> Result<Option<MaskImage>> {
        if self.options.no_dynamic {
            return Ok(None);
        }
        if frame.flow_back.is_some() {
            if let Some(m) = &frame.motion_mask {
                return Ok(Some(m.clone()));
            }
        }
        match (&frame.flow_back, &self.prev) {
            (Some(flow), Some(prev)) => Ok(Some(segment_motion(
                flow,
                &frame.depth,
                &self.cam,
                &frame.pose,
                &prev.pose,
                self.map.config.motion_threshold_px,
            )?)),
            (Some(_), None) => Ok(Some(Image::new(self.cam.width, self.cam.height, false))),
            (None, _) => {
                if !self.warned_no_flow {
                    warn!("frame {} has no optical flow: dynamic handling disabled", frame.timestamp);
                    self.warned_no_flow = true;
                }
                Ok(None)
            }
        }
    }

    fn observed_flow(&self, frame: &FrameBundle, mask: &MaskImage) -> Result<GsFlowField> {
        if mask.count() == 0 {
            return Ok(GsFlowField::default());
        }
        let Some(prev) = &self.prev else {
            // first frame: nothing to lift, so masked points start at rest
            let pts = backproject_points(&frame.depth, &self.cam, &frame.pose, Some(mask))?;
            return Ok(GsFlowField {
                displacements: vec![nalgebra::Vector3::zeros(); pts.len()],
                pixels: pts.iter().map(|(px, _)| *px).collect(),
                points_world: pts.into_iter().map(|(_, p)| p).collect(),
                frame_index: frame.timestamp,
            });
        };
        let mode: FlowMode = self.map.config.flow_mode;
        match lift_gs_flow(frame, prev, &self.cam, mask, mode) {
            Ok(f) => Ok(f),
            Err(Error::EmptyFlow) => Ok(GsFlowField::default()),
            Err(e) => Err(e),
        }
    }

    /// Processes one frame through every stage and scores the result
    /// against the frame itself.
    pub fn process_frame(&mut self, frame: &FrameBundle) -> Result<(FrameMetrics, Option<RgbImage>)> {
        let start = Instant::now();
        let t = frame.timestamp;
        frame.validate(&self.cam).map_err(|e| e.at_stage(t, "input"))?;
        if let Some(prev) = &self.prev {
            if t <= prev.timestamp {
                return Err(Error::InvalidParameter(format!(
                    "frame {t} does not follow frame {}",
                    prev.timestamp
                ))
                .at_stage(t, "input"));
            }
        }
        let gap = self.prev.as_ref().map_or(1, |p| t - p.timestamp);
        self.observability_after_prune = None;

        let mask = self.management_mask(frame).map_err(|e| e.at_stage(t, "segment"))?;
        let mut assigned: BTreeMap<u64, FlowAssignment> = BTreeMap::new();
        let (mut reused, mut spawned) = (0, 0);
        if let Some(m) = &mask {
            let field = self.observed_flow(frame, m).map_err(|e| e.at_stage(t, "flow"))?;
            let lambda_d = self.map.config.lambda_d;
            let assoc = associate_dynamic_with(&field, &self.map.dynamic_set, lambda_d, self.options.match_policy);
            reused = assoc.reuse_count;
            spawned = assoc.spawn_count;
            assigned = apply_management(&mut self.map, &assoc, &field, frame, t).map_err(|e| e.at_stage(t, "manage"))?;
            prune_dynamic(&mut self.map, &field, assoc.d_bar, lambda_d, t);
            self.observability_after_prune = Some(all_observed(&self.map, &field, assoc.d_bar, lambda_d, t));
        }

        let settings = self.settings();
        let static_out = {
            let splats: Vec<&Gaussian> = self.map.static_set.iter().collect();
            render_splats(&splats, &self.cam, &frame.pose, t as f64, &settings)
                .map_err(|e| e.at_stage(t, "static"))?
                .0
        };
        manage_static(&mut self.map, frame, &self.cam, &static_out, mask.as_ref(), t)
            .map_err(|e| e.at_stage(t, "static"))?;

        optimize_frame(&mut self.map, &mut self.optim, frame, &self.cam).map_err(|e| e.at_stage(t, "optimize"))?;

        if self.prev.is_some() {
            for g in self.map.dynamic_set.iter_mut() {
                if let Some(a) = assigned.get(&g.id) {
                    // the provisional segment start has followed any sliding done by the optimizer
                    let prev = g.spline.map_or(a.prev_mean, |s| s.m_minus);
                    let curr = g.mean;
                    update_spline_with_gap(g, prev, curr, a.flow, t, gap).map_err(|e| e.at_stage(t, "spline"))?;
                }
            }
        }
        self.map.frame_index = t;
        self.map.check_invariants().map_err(|e| e.at_stage(t, "invariants"))?;

        let out = render(&self.map, &self.cam, &frame.pose, t as f64, &settings).map_err(|e| e.at_stage(t, "metrics"))?;
        let gt_mask = frame.motion_mask.as_ref().or(mask.as_ref());
        let (dyna_psnr, static_psnr) =
            split_psnr(&out.rgb, &frame.rgb, gt_mask).map_err(|e| e.at_stage(t, "metrics"))?;
        let metrics = FrameMetrics {
            frame: t,
            psnr: psnr(&out.rgb, &frame.rgb, None).map_err(|e| e.at_stage(t, "metrics"))?,
            ssim: ssim(&out.rgb, &frame.rgb).map_err(|e| e.at_stage(t, "metrics"))?,
            dyna_psnr,
            static_psnr,
            n_static: self.map.static_set.len(),
            n_dynamic: self.map.dynamic_set.len(),
            reuse_rate: reuse_rate(&self.map, t),
            reused,
            spawned,
            ms_elapsed: self.options.timing.then(|| start.elapsed().as_secs_f64() * 1e3),
        };
        info!(
            "frame {t}: psnr {:.2} dyna {:?} static {} dynamic {}",
            metrics.psnr, metrics.dyna_psnr, metrics.n_static, metrics.n_dynamic
        );
        self.prev = Some(FrameBundle {
            flow_back: None,
            motion_mask: None,
            ..frame.clone()
        });
        let keep = self.options.keep_renders.then_some(out.rgb);
        Ok((metrics, keep))
    }
}

pub struct RunResult {
    pub map: GaussianMap,
    pub metrics: Metrics,
    /// Final render of every frame, when requested.
    pub renders: Vec<RgbImage>,
}

/// Maps a whole sequence frame by frame.
pub fn run_sequence(
    frames: &[FrameBundle],
    cam: &CameraModel,
    config: &ManageConfig,
    options: &RunOptions,
) -> Result<RunResult> {
    let mut mapper = Mapper::new(*cam, config.clone(), options.clone())?;
    let mut per_frame = Vec::with_capacity(frames.len());
    let mut renders = Vec::new();
    for f in frames {
        let (m, r) = mapper.process_frame(f)?;
        per_frame.push(m);
        renders.extend(r);
    }
    Ok(RunResult {
        map: mapper.map,
        metrics: Metrics::from_frames(per_frame),
        renders,
    })
}
