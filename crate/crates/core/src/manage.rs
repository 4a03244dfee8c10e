//! Dynamic Gaussian management (association, reuse, spawn, pruning, budget)
//! and the simpler static-set maintenance.

use std::collections::{BTreeMap, HashSet};

use nalgebra::{UnitQuaternion, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::GsFlowField;
use crate::frame::FrameBundle;
use crate::gaussian::{logit, Gaussian, GaussianMap};
use crate::geometry::CameraModel;
use crate::image::{MaskImage, RgbImage};
use crate::kdtree::KdTree;
use crate::motion::MotionSpline;
use crate::render::RenderOutput;
use crate::sh::dc_from_rgb;

pub const MIN_SPAWN_SCALE: f64 = 1e-4;
pub const MAX_SPAWN_SCALE: f64 = 0.5;
/// Used when a spawn has no spawned neighbor to size itself against.
const LONE_SPAWN_SCALE: f64 = 0.01;
pub const STATIC_ALPHA_MIN: f64 = 0.5;
pub const STATIC_DEPTH_GAP: f64 = 0.1;
pub const STATIC_STRIDE: usize = 4;
/// Blending weight below which a splat counts as not rendered.
pub const VISIBLE_WEIGHT: f64 = 1.0 / 255.0;

/// How competing points resolve when several pick the same Gaussian.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MatchPolicy {
    /// The closest point claims the Gaussian; the others spawn.
    #[default]
    OneToOne,
    /// Every point within the threshold reuses its nearest Gaussian; the
    /// closest one places it.
    ManyToOne,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub point: usize,
    pub gaussian_id: u64,
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssociationResult {
    pub matches: Vec<Match>,
    pub new_points: Vec<usize>,
    /// Mean nearest-neighbor distance over all points, meters.
    pub d_bar: f64,
    /// Distinct Gaussians reused.
    pub reuse_count: usize,
    pub spawn_count: usize,
}

/// Flow bookkeeping for one reused or spawned Gaussian, consumed by the
/// spline update after optimization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowAssignment {
    /// Position at the earlier frame.
    pub prev_mean: Vector3<f64>,
    /// Matched displacement back to the earlier frame.
    pub flow: Vector3<f64>,
    pub spawned: bool,
}

/// Transformed points `p + F`: current observations carried back in time.
pub fn transformed_points(flow: &GsFlowField) -> Vec<Vector3<f64>> {
    flow.points_world
        .iter()
        .zip(&flow.displacements)
        .map(|(p, f)| p + f)
        .collect()
}

pub fn associate_dynamic(flow: &GsFlowField, dyn_set: &[Gaussian], lambda_d: f64) -> AssociationResult {
    associate_dynamic_with(flow, dyn_set, lambda_d, MatchPolicy::OneToOne)
}

pub fn associate_dynamic_with(
    flow: &GsFlowField,
    dyn_set: &[Gaussian],
    lambda_d: f64,
    policy: MatchPolicy,
) -> AssociationResult {
    let n = flow.len();
    if dyn_set.is_empty() || n == 0 {
        return AssociationResult {
            new_points: (0..n).collect(),
            spawn_count: n,
            ..Default::default()
        };
    }
    let tree = KdTree::new(dyn_set.iter().map(|g| g.mean).collect());
    let queries = transformed_points(flow);
    let nearest: Vec<Option<(usize, f64)>> = queries.par_iter().map(|q| tree.nearest(q)).collect();
    let finite: Vec<f64> = nearest.iter().flatten().map(|&(_, d)| d).collect();
    let d_bar = if finite.is_empty() { 0.0 } else { finite.iter().sum::<f64>() / finite.len() as f64 };
    let threshold = lambda_d * d_bar;

    // closest point per Gaussian, ties to the lower point index
    let mut owner: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (i, nn) in nearest.iter().enumerate() {
        if let Some((gi, d)) = *nn {
            if d <= threshold {
                let e = owner.entry(gi).or_insert((d, i));
                if d < e.0 {
                    *e = (d, i);
                }
            }
        }
    }
    let mut out = AssociationResult {
        d_bar,
        reuse_count: owner.len(),
        ..Default::default()
    };
    for (i, nn) in nearest.iter().enumerate() {
        match *nn {
            Some((gi, d)) if d <= threshold && (policy == MatchPolicy::ManyToOne || owner[&gi].1 == i) => {
                out.matches.push(Match {
                    point: i,
                    gaussian_id: dyn_set[gi].id,
                    distance: d,
                })
            }
            _ => out.new_points.push(i),
        }
    }
    out.spawn_count = out.new_points.len();
    out
}

/// Half the median distance to the three nearest other points, clamped.
/// Neighbors are drawn from `points` and from `existing`.
fn spawn_scales(points: &[Vector3<f64>], existing: &[Vector3<f64>]) -> Vec<f64> {
    let all: Vec<Vector3<f64>> = points.iter().chain(existing).copied().collect();
    let tree = KdTree::new(all);
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let d = tree.k_nearest_distances(p, 3, Some(i));
            let s = match d.len() {
                0 => LONE_SPAWN_SCALE,
                k => 0.5 * if k == 2 { 0.5 * (d[0] + d[1]) } else { d[k / 2] },
            };
            s.clamp(MIN_SPAWN_SCALE, MAX_SPAWN_SCALE)
        })
        .collect()
}

/// Fresh splats at `points`, colored from `colors` and oriented so their
/// flattened axis faces the camera with rotation `facing`.
fn spawn_gaussians(
    map: &mut GaussianMap,
    points: &[Vector3<f64>],
    colors: &[[f64; 3]],
    facing: &UnitQuaternion<f64>,
    t: i64,
    dynamic: bool,
) -> Vec<Gaussian> {
    let existing: Vec<Vector3<f64>> = if dynamic { &map.dynamic_set } else { &map.static_set }
        .iter()
        .map(|g| g.mean)
        .collect();
    let scales = spawn_scales(points, &existing);
    let n_sh = map.config.sh_basis_count();
    points
        .iter()
        .zip(colors)
        .zip(scales)
        .map(|((p, c), s)| {
            let id = map.alloc_id();
            let mut g = if dynamic {
                Gaussian::new_dynamic(id, *p, t)
            } else {
                Gaussian::new_static(id, *p, t)
            };
            g.rotation = *facing;
            g.log_scale = Vector3::repeat(s.ln());
            g.opacity_logit = logit(0.5);
            g.sh = vec![[0.0; 3]; n_sh];
            g.sh[0] = dc_from_rgb(*c);
            g
        })
        .collect()
}

/// Applies reuse and spawn decisions; returns flow assignments keyed by id.
pub fn apply_management(
    map: &mut GaussianMap,
    assoc: &AssociationResult,
    flow: &GsFlowField,
    frame: &FrameBundle,
    t: i64,
) -> Result<BTreeMap<u64, FlowAssignment>> {
    let rgb: &RgbImage = &frame.rgb;
    let index: BTreeMap<u64, usize> = map.dynamic_set.iter().enumerate().map(|(i, g)| (g.id, i)).collect();
    let mut assigned = BTreeMap::new();
    let span = if map.frame_index >= 0 && t > map.frame_index { (t - map.frame_index) as f64 } else { 1.0 };

    // reuse: the closest matched point places the Gaussian
    let mut best: BTreeMap<u64, &Match> = BTreeMap::new();
    for m in &assoc.matches {
        if m.point >= flow.len() {
            return Err(Error::ContractViolation(format!("match refers to point {} of {}", m.point, flow.len())));
        }
        let e = best.entry(m.gaussian_id).or_insert(m);
        if m.distance < e.distance {
            *e = m;
        }
    }
    for (id, m) in best {
        let &gi = index
            .get(&id)
            .ok_or_else(|| Error::ContractViolation(format!("match refers to unknown gaussian {id}")))?;
        let g = &mut map.dynamic_set[gi];
        let prev_mean = g.mean;
        let p = flow.points_world[m.point];
        let f = flow.displacements[m.point];
        g.mean = p;
        g.last_observed_frame = t;
        g.spline = Some(provisional_spline(prev_mean, p, f, t, span));
        assigned.insert(
            id,
            FlowAssignment {
                prev_mean,
                flow: f,
                spawned: false,
            },
        );
    }

    // spawn
    let pts: Vec<Vector3<f64>> = assoc.new_points.iter().map(|&i| flow.points_world[i]).collect();
    let colors: Vec<[f64; 3]> = assoc
        .new_points
        .iter()
        .map(|&i| {
            let [x, y] = flow.pixels[i];
            rgb.get(x, y).copied().ok_or_else(|| Error::Shape(format!("flow pixel ({x}, {y}) outside the image")))
        })
        .collect::<Result<_>>()?;
    let spawned = spawn_gaussians(map, &pts, &colors, &frame.pose.rotation, t, true);
    for (mut g, &i) in spawned.into_iter().zip(&assoc.new_points) {
        let f = flow.displacements[i];
        let prev_mean = g.mean + f;
        g.spline = Some(provisional_spline(prev_mean, g.mean, f, t, span));
        assigned.insert(
            g.id,
            FlowAssignment {
                prev_mean,
                flow: f,
                spawned: true,
            },
        );
        map.dynamic_set.push(g);
    }
    Ok(assigned)
}

/// Segment used until the post-optimization update: it already ends at the
/// current point and starts where the flow says the point came from.
fn provisional_spline(
    prev: Vector3<f64>,
    curr: Vector3<f64>,
    flow: Vector3<f64>,
    t: i64,
    span: f64,
) -> MotionSpline {
    MotionSpline {
        m_minus: prev,
        m_plus: curr,
        v_minus: -flow / span,
        v_plus: -flow / span,
        t_anchor: t,
        span,
    }
}

/// Where a dynamic Gaussian was at the earlier frame, as far as the map knows.
pub fn earlier_position(g: &Gaussian, t: i64) -> Vector3<f64> {
    match &g.spline {
        Some(s) if s.t_anchor == t => s.m_minus,
        _ => g.mean,
    }
}

/// True when `g` has a transformed observed point within `radius`.
fn observed(tree: &KdTree, g: &Gaussian, t: i64, radius: f64) -> bool {
    tree.any_within(&earlier_position(g, t), radius)
}

/// Observability, longevity and budget pruning. Returns the deleted ids.
pub fn prune_dynamic(map: &mut GaussianMap, flow: &GsFlowField, d_bar: f64, lambda_d: f64, t: i64) -> Vec<u64> {
    let tree = KdTree::new(transformed_points(flow));
    let radius = lambda_d * d_bar;
    let longevity = map.config.dyna_longevity_w;
    let keep: Vec<bool> = map
        .dynamic_set
        .par_iter()
        .map(|g| !tree.is_empty() && observed(&tree, g, t, radius) && t - g.birth_frame <= longevity)
        .collect();
    let mut deleted = Vec::new();
    let mut it = keep.iter();
    map.dynamic_set.retain(|g| {
        let k = *it.next().unwrap_or(&false);
        if !k {
            deleted.push(g.id);
        }
        k
    });
    let budget = map.config.dyna_budget;
    if map.dynamic_set.len() > budget {
        let mut by_age: Vec<(i64, u64)> = map.dynamic_set.iter().map(|g| (g.birth_frame, g.id)).collect();
        by_age.sort_unstable();
        let drop: HashSet<u64> = by_age[..map.dynamic_set.len() - budget].iter().map(|&(_, id)| id).collect();
        map.dynamic_set.retain(|g| !drop.contains(&g.id));
        deleted.extend(by_age.iter().filter(|(_, id)| drop.contains(id)).map(|&(_, id)| id));
    }
    deleted
}

/// Checks the observability postcondition of [`prune_dynamic`].
pub fn all_observed(map: &GaussianMap, flow: &GsFlowField, d_bar: f64, lambda_d: f64, t: i64) -> bool {
    let tree = KdTree::new(transformed_points(flow));
    let radius = lambda_d * d_bar;
    map.dynamic_set.iter().all(|g| observed(&tree, g, t, radius))
}

/// Fraction of dynamic Gaussians alive for at least two consecutive frames.
pub fn reuse_rate(map: &GaussianMap, t: i64) -> f64 {
    if map.dynamic_set.is_empty() {
        return 0.0;
    }
    let old = map.dynamic_set.iter().filter(|g| g.birth_frame < t).count();
    old as f64 / map.dynamic_set.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StaticReport {
    pub spawned: usize,
    pub deleted: usize,
}

/// Grows the static set into uncovered or depth-inconsistent regions and
/// drops splats that stayed invisible for too long. `render_out` must come
/// from rendering exactly `map.static_set` at the frame's pose.
pub fn manage_static(
    map: &mut GaussianMap,
    frame: &FrameBundle,
    cam: &CameraModel,
    render_out: &RenderOutput,
    mask: Option<&MaskImage>,
    t: i64,
) -> Result<StaticReport> {
    if render_out.max_weight.len() != map.static_set.len() {
        return Err(Error::ContractViolation(format!(
            "static render has {} splats, map has {}",
            render_out.max_weight.len(),
            map.static_set.len()
        )));
    }
    if render_out.rgb.dims() != (cam.width, cam.height) || frame.depth.dims() != (cam.width, cam.height) {
        return Err(Error::Shape("static management inputs do not match the camera".into()));
    }
    if let Some(m) = mask {
        if m.dims() != (cam.width, cam.height) {
            return Err(Error::Shape("motion mask does not match the camera".into()));
        }
    }

    let window = map.config.static_unseen_w;
    let before = map.static_set.len();
    for (g, &w) in map.static_set.iter_mut().zip(&render_out.max_weight) {
        if w >= VISIBLE_WEIGHT {
            g.unseen_frames = 0;
            g.last_observed_frame = t;
        } else {
            g.unseen_frames += 1;
        }
    }
    map.static_set.retain(|g| g.unseen_frames < window);
    let deleted = before - map.static_set.len();

    let r = frame.pose.rotation_matrix();
    let mut pts = Vec::new();
    let mut colors = Vec::new();
    for y in (0..cam.height).step_by(STATIC_STRIDE) {
        for x in (0..cam.width).step_by(STATIC_STRIDE) {
            if mask.is_some_and(|m| m[(x, y)]) {
                continue;
            }
            let d = frame.depth[(x, y)];
            if !(d > 0.0) {
                continue;
            }
            let uncovered = render_out.alpha[(x, y)] < STATIC_ALPHA_MIN;
            let inconsistent = (render_out.depth[(x, y)] - d).abs() > STATIC_DEPTH_GAP;
            if uncovered || inconsistent {
                pts.push(r * cam.backproject(x as f64, y as f64, d) + frame.pose.translation);
                colors.push(frame.rgb[(x, y)]);
            }
        }
    }
    let spawned = spawn_gaussians(map, &pts, &colors, &frame.pose.rotation, t, false);
    let n = spawned.len();
    map.static_set.extend(spawned);
    Ok(StaticReport { spawned: n, deleted })
}
