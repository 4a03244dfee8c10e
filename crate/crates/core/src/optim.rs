//! Per-frame joint rendering loss and decoupled Adam updates of the static
//! and dynamic sets over a short window of keyframes.

use std::collections::{BTreeMap, HashSet, VecDeque};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{LearningRates, OptimizerKind};
use crate::error::{Error, Result};
use crate::frame::FrameBundle;
use crate::gaussian::{Gaussian, GaussianMap, FLATTEN_EPS};
use crate::geometry::CameraModel;
use crate::image::{DepthImage, Image, RgbImage};
use crate::render::{render_backward, render_splats, RenderOutput, RenderSettings, SplatGrad};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;
/// Share of non-finite iterations tolerated before a frame is declared diverged.
pub const MAX_SKIP_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub loss_c: f64,
    pub loss_d: f64,
    pub total: f64,
}

fn check_frame_dims(render: &RenderOutput, frame: &FrameBundle) -> Result<()> {
    if render.rgb.dims() != frame.rgb.dims() || render.depth.dims() != frame.depth.dims() {
        return Err(Error::Shape("render and frame differ in size".into()));
    }
    Ok(())
}

#[inline]
fn depth_valid(observed: f64, rendered: f64) -> bool {
    observed > 0.0 && rendered > 0.0
}

/// Mean L1 color error plus `depth_weight` times mean L1 depth error over
/// pixels where both depths are valid.
pub fn compute_loss(render: &RenderOutput, frame: &FrameBundle, depth_weight: f64) -> Result<LossTerms> {
    check_frame_dims(render, frame)?;
    let n = render.rgb.len() as f64 * 3.0;
    let loss_c = render
        .rgb
        .data()
        .iter()
        .zip(frame.rgb.data())
        .map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs())
        .sum::<f64>()
        / n;
    let (mut sum, mut count) = (0.0, 0usize);
    for (r, o) in render.depth.data().iter().zip(frame.depth.data()) {
        if depth_valid(*o, *r) {
            sum += (r - o).abs();
            count += 1;
        }
    }
    let loss_d = if count == 0 { 0.0 } else { sum / count as f64 };
    Ok(LossTerms {
        loss_c,
        loss_d,
        total: loss_c + depth_weight * loss_d,
    })
}

/// Upstream image gradients of [`compute_loss`]'s total.
pub fn loss_gradients(render: &RenderOutput, frame: &FrameBundle, depth_weight: f64) -> Result<(RgbImage, DepthImage)> {
    check_frame_dims(render, frame)?;
    let (w, h) = render.rgb.dims();
    let n = (w * h) as f64 * 3.0;
    let sign = |d: f64| if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
    let g_rgb = Image::from_fn(w, h, |x, y| {
        let (a, b) = (render.rgb[(x, y)], frame.rgb[(x, y)]);
        [0, 1, 2].map(|c| sign(a[c] - b[c]) / n)
    });
    let count = render
        .depth
        .data()
        .iter()
        .zip(frame.depth.data())
        .filter(|(r, o)| depth_valid(**o, **r))
        .count();
    let g_depth = Image::from_fn(w, h, |x, y| {
        let (r, o) = (render.depth[(x, y)], frame.depth[(x, y)]);
        if count > 0 && depth_valid(o, r) {
            depth_weight * sign(r - o) / count as f64
        } else {
            0.0
        }
    });
    Ok((g_rgb, g_depth))
}

const N_GEOM: usize = 10;

/// Adam moments for one Gaussian, laid out as mean(3), rotation(4),
/// log-scale(3), opacity(1), sh(3 per basis).
#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: Vec<u32>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: vec![0; n],
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct OptimState {
    moments: BTreeMap<u64, Moments>,
    /// Most recent keyframes, oldest first.
    pub window: VecDeque<FrameBundle>,
    pub skipped_iterations: usize,
    pub total_iterations: usize,
}

impl OptimState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of Gaussians with optimizer state.
    pub fn tracked(&self) -> usize {
        self.moments.len()
    }

    fn retain_live(&mut self, map: &GaussianMap) {
        let live: HashSet<u64> = map.iter().map(|g| g.id).collect();
        self.moments.retain(|id, _| live.contains(id));
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameReport {
    pub iterations: usize,
    pub skipped: usize,
    /// Loss of the last completed iteration.
    pub last_loss: Option<LossTerms>,
}

fn flatten_grad(g: &SplatGrad, out: &mut Vec<f64>) {
    out.clear();
    out.extend(g.mean.iter());
    out.extend(g.rotation);
    out.extend(g.log_scale.iter());
    out.push(g.opacity_logit);
    out.extend(g.sh.iter().flatten());
}

struct StepRule {
    kind: OptimizerKind,
    lr: LearningRates,
    move_mean: bool,
    max_log_scale: f64,
}

fn apply_step(g: &mut Gaussian, grad: &[f64], mom: &mut Moments, rule: &StepRule) {
    let mut delta = vec![0.0; grad.len()];
    for k in 0..grad.len() {
        if k < 3 && !rule.move_mean {
            continue;
        }
        let lr = if k < N_GEOM { rule.lr.geometry } else { rule.lr.appearance };
        delta[k] = match rule.kind {
            OptimizerKind::Sgd => -lr * grad[k],
            OptimizerKind::Adam => {
                mom.step[k] += 1;
                let s = mom.step[k] as i32;
                mom.m[k] = ADAM_BETA1 * mom.m[k] + (1.0 - ADAM_BETA1) * grad[k];
                mom.v[k] = ADAM_BETA2 * mom.v[k] + (1.0 - ADAM_BETA2) * grad[k] * grad[k];
                let mh = mom.m[k] / (1.0 - ADAM_BETA1.powi(s));
                let vh = mom.v[k] / (1.0 - ADAM_BETA2.powi(s));
                -lr * mh / (vh.sqrt() + ADAM_EPS)
            }
        };
    }
    if rule.move_mean {
        let d = Vector3::new(delta[0], delta[1], delta[2]);
        g.mean += d;
        // a dynamic splat slides as a whole: its motion segment keeps its shape
        if let Some(s) = g.spline.as_mut() {
            s.m_minus += d;
            s.m_plus = g.mean;
        }
    }
    let q = g.rotation.into_inner();
    let q = Quaternion::new(q.w + delta[3], q.i + delta[4], q.j + delta[5], q.k + delta[6]);
    // renormalizing an unchanged quaternion can still flip its last bits
    let moved = delta[3..7].iter().any(|d| *d != 0.0);
    if moved && q.norm() > 0.0 && q.coords.iter().all(|c| c.is_finite()) {
        g.rotation = UnitQuaternion::from_quaternion(q);
    }
    for a in 0..3 {
        g.log_scale[a] = (g.log_scale[a] + delta[7 + a]).clamp(FLATTEN_EPS.ln(), rule.max_log_scale);
    }
    g.opacity_logit += delta[10];
    for (b, coef) in g.sh.iter_mut().enumerate() {
        for c in 0..3 {
            coef[c] += delta[11 + 3 * b + c];
        }
    }
}

/// One gradient step of every Gaussian against `view`. Returns the loss
/// before the step, or `None` when the gradients were not finite.
fn step_view(
    map: &mut GaussianMap,
    optim: &mut OptimState,
    view: &FrameBundle,
    current_time: i64,
    cam: &CameraModel,
    settings: &RenderSettings,
) -> Result<Option<LossTerms>> {
    let cfg = map.config.clone();
    let tau = view.timestamp as f64;
    let grads = {
        let splats: Vec<&Gaussian> = map.iter().collect();
        let (out, state) = render_splats(&splats, cam, &view.pose, tau, settings)?;
        let loss = compute_loss(&out, view, cfg.depth_weight)?;
        let (g_rgb, g_depth) = loss_gradients(&out, view, cfg.depth_weight)?;
        let grads = render_backward(&splats, cam, &view.pose, tau, &state, &g_rgb, &g_depth)?;
        if !grads.iter().all(SplatGrad::is_finite) {
            return Ok(None);
        }
        (grads, loss)
    };
    let (grads, loss) = grads;
    let max_log_scale = cfg.scene_extent.ln();
    let n_static = map.static_set.len();
    let mut flat = Vec::new();
    for (i, (g, grad)) in map
        .static_set
        .iter_mut()
        .chain(map.dynamic_set.iter_mut())
        .zip(&grads)
        .enumerate()
    {
        let dynamic = i >= n_static;
        flatten_grad(grad, &mut flat);
        let mom = optim.moments.entry(g.id).or_insert_with(|| Moments::new(flat.len()));
        if mom.m.len() != flat.len() {
            *mom = Moments::new(flat.len());
        }
        let rule = StepRule {
            kind: cfg.optimizer,
            lr: if dynamic { cfg.lr_dynamic } else { cfg.lr_static },
            // past positions of dynamic splats belong to their spline
            move_mean: !dynamic || view.timestamp == current_time,
            max_log_scale,
        };
        apply_step(g, &flat, mom, &rule);
    }
    Ok(Some(loss))
}

/// Runs `iters_per_frame` iterations over `frame_t` and the keyframe
/// window, then admits `frame_t` to the window if it is a keyframe.
pub fn optimize_frame(
    map: &mut GaussianMap,
    optim: &mut OptimState,
    frame_t: &FrameBundle,
    cam: &CameraModel,
) -> Result<FrameReport> {
    let cfg = map.config.clone();
    let settings = RenderSettings::with_lambda_alpha(cfg.lambda_alpha);
    optim.retain_live(map);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (frame_t.timestamp as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    let mut skipped = 0;
    let mut last_loss = None;
    for _ in 0..cfg.iters_per_frame {
        let use_current = optim.window.is_empty() || rng.random_bool(0.5);
        let view = if use_current {
            frame_t
        } else {
            &optim.window[rng.random_range(0..optim.window.len())]
        };
        let view = view.clone();
        match step_view(map, optim, &view, frame_t.timestamp, cam, &settings)? {
            Some(l) => last_loss = Some(l),
            None => skipped += 1,
        }
    }
    optim.skipped_iterations += skipped;
    optim.total_iterations += cfg.iters_per_frame;
    if skipped as f64 > MAX_SKIP_FRACTION * cfg.iters_per_frame as f64 {
        return Err(Error::OptimizationDiverged {
            skipped,
            total: cfg.iters_per_frame,
        });
    }
    if frame_t.timestamp % cfg.keyframe_stride == 0 && cfg.window_k > 0 {
        optim.window.push_back(FrameBundle {
            flow_back: None,
            motion_mask: None,
            ..frame_t.clone()
        });
        while optim.window.len() > cfg.window_k {
            optim.window.pop_front();
        }
    }
    Ok(FrameReport {
        iterations: cfg.iters_per_frame,
        skipped,
        last_loss,
    })
}
