//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use dynagmap::geometry::CameraView;
use dynagmap::manage::{associate_dynamic_with, MatchPolicy};
use dynagmap::GsFlowField;
use dynagmap::render::{project_gaussian, render_backward, render_splats, Projected2D, Projection};
use dynagmap::{CameraModel, Gaussian, Image, Pose, RenderOutput, RenderSettings};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct NaiveOutput {
    pub rgb: Image<[f64; 3]>,
    pub depth: Image<f64>,
    pub alpha: Image<f64>,
    pub count: Image<u32>,
}

/// Direct O(N*H*W) renderer: every pixel walks every projected splat.
pub fn naive_render(
    splats: &[&Gaussian],
    cam: &CameraModel,
    pose: &Pose,
    tau: f64,
    s: &RenderSettings,
) -> NaiveOutput {
    let view = CameraView::new(pose);
    let mut proj: Vec<Projected2D> = splats
        .iter()
        .enumerate()
        .filter_map(|(i, g)| match project_gaussian(g, i, cam, &view, tau, s).unwrap() {
            Projection::Visible(p) => Some(p),
            _ => None,
        })
        .collect();
    proj.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id)));

    let (w, h) = (cam.width, cam.height);
    let mut out = NaiveOutput {
        rgb: Image::new(w, h, [0.0; 3]),
        depth: Image::new(w, h, 0.0),
        alpha: Image::new(w, h, 0.0),
        count: Image::new(w, h, 0),
    };
    for y in 0..h {
        for x in 0..w {
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let mut depth = 0.0;
            let mut found = false;
            let mut n = 0;
            for p in &proj {
                let dx = x as f64 - p.mean2d[0];
                let dy = y as f64 - p.mean2d[1];
                let q = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
                let f = p.opacity * (-0.5 * q).exp();
                if f < s.min_alpha {
                    continue;
                }
                let wgt = f * t;
                for k in 0..3 {
                    c[k] += p.color[k] * wgt;
                }
                if !found && wgt > s.lambda_alpha {
                    depth = p.depth;
                    found = true;
                }
                t *= 1.0 - f;
                n += 1;
                if t < s.min_transmittance {
                    break;
                }
            }
            out.rgb[(x, y)] = c;
            out.depth[(x, y)] = depth;
            out.alpha[(x, y)] = 1.0 - t;
            out.count[(x, y)] = n;
        }
    }
    out
}

pub fn small_camera(w: usize, h: usize, f: f64) -> CameraModel {
    CameraModel::new(f, f, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    loop {
        let q = Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if q.norm() > 0.2 {
            return UnitQuaternion::new_normalize(q);
        }
    }
}

/// A random camera looking roughly down its own +z at the origin region.
pub fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let eye = Vector3::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    );
    let yaw = rng.random_range(-0.3..0.3);
    let pitch = rng.random_range(-0.3..0.3);
    let roll = rng.random_range(-0.3..0.3);
    Pose::new(UnitQuaternion::from_euler_angles(roll, pitch, yaw), eye)
}

/// Random splats placed in the camera frustum of `pose`, well inside the image.
pub fn random_splats(
    rng: &mut ChaCha8Rng,
    n: usize,
    cam: &CameraModel,
    pose: &Pose,
    sh_degree: u8,
) -> Vec<Gaussian> {
    let n_sh = (sh_degree as usize + 1).pow(2);
    (0..n)
        .map(|i| {
            let z = rng.random_range(1.5..3.0);
            let u = rng.random_range(0.25..0.75) * cam.width as f64;
            let v = rng.random_range(0.25..0.75) * cam.height as f64;
            let p_cam = cam.backproject(u, v, z);
            let mut g = Gaussian::new_static(i as u64 * 3 + 1, pose.to_world(&p_cam), 0);
            g.rotation = random_rotation(rng);
            g.log_scale = Vector3::new(
                rng.random_range(0.04f64.ln()..0.12f64.ln()),
                rng.random_range(0.04f64.ln()..0.12f64.ln()),
                rng.random_range(0.04f64.ln()..0.12f64.ln()),
            );
            g.opacity_logit = rng.random_range(-1.0..2.5);
            g.sh = (0..n_sh)
                .map(|b| {
                    if b == 0 {
                        [0.0; 3].map(|_| (rng.random_range(0.25..0.75) - 0.5) / 0.282_094_791_773_878_14)
                    } else {
                        [0.0; 3].map(|_| rng.random_range(-0.08..0.08))
                    }
                })
                .collect();
            g
        })
        .collect()
}

pub fn random_upstream(rng: &mut ChaCha8Rng, cam: &CameraModel) -> (Image<[f64; 3]>, Image<f64>) {
    let g_rgb = Image::from_fn(cam.width, cam.height, |_, _| {
        [0.0; 3].map(|_| rng.random_range(-1.0..1.0))
    });
    let g_depth = Image::from_fn(cam.width, cam.height, |_, _| rng.random_range(-1.0..1.0));
    (g_rgb, g_depth)
}

pub fn weighted_loss(out: &RenderOutput, g_rgb: &Image<[f64; 3]>, g_depth: &Image<f64>) -> f64 {
    let mut l = 0.0;
    for (c, g) in out.rgb.data().iter().zip(g_rgb.data()) {
        l += c[0] * g[0] + c[1] * g[1] + c[2] * g[2];
    }
    for (d, g) in out.depth.data().iter().zip(g_depth.data()) {
        l += d * g;
    }
    l
}

pub const CLASSES: [&str; 5] = ["mean", "rotation", "log_scale", "opacity_logit", "sh"];

#[derive(Debug, Default, Clone)]
pub struct GradCheckStats {
    /// Worst relative error per parameter class, ordered like [`CLASSES`].
    pub max_rel: [f64; 5],
    pub checked: usize,
    /// Perturbations that changed a discrete rendering decision (skip
    /// threshold, early stop, culling or surface selection) and so have no
    /// meaningful finite difference.
    pub discontinuous: usize,
}

impl GradCheckStats {
    pub fn merge(&mut self, o: &GradCheckStats) {
        for k in 0..5 {
            self.max_rel[k] = self.max_rel[k].max(o.max_rel[k]);
        }
        self.checked += o.checked;
        self.discontinuous += o.discontinuous;
    }

    pub fn worst(&self) -> f64 {
        self.max_rel.iter().cloned().fold(0.0, f64::max)
    }
}

/// Relative error with a small absolute floor so gradients that are zero
/// up to roundoff do not dominate.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

/// Compares analytic gradients with central differences (step `h`) for every
/// scalar parameter of every splat in the scene.
pub fn gradcheck_scene(
    splats: &[Gaussian],
    cam: &CameraModel,
    pose: &Pose,
    settings: &RenderSettings,
    g_rgb: &Image<[f64; 3]>,
    g_depth: &Image<f64>,
    h: f64,
) -> GradCheckStats {
    let refs: Vec<&Gaussian> = splats.iter().collect();
    let (base, state) = render_splats(&refs, cam, pose, 0.0, settings).unwrap();
    let base_order: Vec<u64> = state.projected().iter().map(|p| p.id).collect();
    let grads = render_backward(&refs, cam, pose, 0.0, &state, g_rgb, g_depth).unwrap();
    let w2c = pose.rotation_matrix().transpose();

    let mut stats = GradCheckStats::default();
    for (i, g) in splats.iter().enumerate() {
        let mut n_params: Vec<(usize, usize)> = Vec::new();
        for k in 0..3 {
            n_params.push((0, k));
        }
        for k in 0..4 {
            n_params.push((1, k));
        }
        for k in 0..3 {
            n_params.push((2, k));
        }
        n_params.push((3, 0));
        for k in 0..g.sh.len() * 3 {
            n_params.push((4, k));
        }
        for (class, k) in n_params {
            let perturb = |sign: f64| -> (Gaussian, f64) {
                let mut p = g.clone();
                let mut dz = 0.0;
                match class {
                    0 => {
                        let mut d = Vector3::zeros();
                        d[k] = sign * h;
                        p.mean += d;
                        dz = (w2c * d).z;
                    }
                    1 => {
                        let mut q = *g.rotation.quaternion();
                        // (w, x, y, z) -> nalgebra coords (x, y, z, w)
                        q.coords[[3, 0, 1, 2][k]] += sign * h;
                        p.rotation = UnitQuaternion::new_normalize(q);
                    }
                    2 => p.log_scale[k] += sign * h,
                    3 => p.opacity_logit += sign * h,
                    _ => p.sh[k / 3][k % 3] += sign * h,
                }
                (p, dz)
            };
            let mut losses = [0.0; 2];
            let mut smooth = true;
            for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
                let (p, dz) = perturb(sign);
                let mut scene: Vec<&Gaussian> = refs.clone();
                scene[i] = &p;
                let (out, st) = render_splats(&scene, cam, pose, 0.0, settings).unwrap();
                losses[s] = weighted_loss(&out, g_rgb, g_depth);
                smooth &= out.contributors == base.contributors
                    && st.projected().iter().map(|p| p.id).eq(base_order.iter().copied());
                for (a, b) in out.depth.data().iter().zip(base.depth.data()) {
                    let diff = a - b;
                    if diff != 0.0 && (diff - dz).abs() > 1e-9 {
                        smooth = false;
                    }
                }
            }
            if !smooth {
                stats.discontinuous += 1;
                continue;
            }
            let numeric = (losses[0] - losses[1]) / (2.0 * h);
            let gr = &grads[i];
            let analytic = match class {
                0 => gr.mean[k],
                1 => gr.rotation[k],
                2 => gr.log_scale[k],
                3 => gr.opacity_logit,
                _ => gr.sh[k / 3][k % 3],
            };
            let e = rel_err(analytic, numeric);
            if e > stats.max_rel[class] {
                stats.max_rel[class] = e;
            }
            stats.checked += 1;
        }
    }
    stats
}

pub fn field(points: Vec<Vector3<f64>>, displacements: Vec<Vector3<f64>>) -> GsFlowField {
    GsFlowField {
        pixels: vec![[0, 0]; points.len()],
        points_world: points,
        displacements,
        frame_index: 1,
    }
}

/// Coordinates on a coarse lattice so exact distance ties are common.
pub fn lattice_point(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-4..=4) as f64 * 0.25,
        rng.random_range(-4..=4) as f64 * 0.25,
        rng.random_range(-2..=2) as f64 * 0.25,
    )
}

pub fn random_point(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

pub struct Expected {
    pub matches: Vec<(usize, u64, f64)>,
    pub new_points: Vec<usize>,
    pub d_bar: f64,
    pub reuse: usize,
}

/// Linear-scan association, written independently of the kd-tree path.
pub fn brute_force_association(flow: &GsFlowField, gs: &[Gaussian], lambda: f64, policy: MatchPolicy) -> Expected {
    let n = flow.points_world.len();
    if gs.is_empty() || n == 0 {
        return Expected { matches: vec![], new_points: (0..n).collect(), d_bar: 0.0, reuse: 0 };
    }
    let mut nn = Vec::with_capacity(n);
    for i in 0..n {
        let q = flow.points_world[i] + flow.displacements[i];
        let mut best = (usize::MAX, f64::INFINITY);
        for (j, g) in gs.iter().enumerate() {
            let d = (q - g.mean).norm();
            if d < best.1 {
                best = (j, d);
            }
        }
        nn.push(best);
    }
    let d_bar = nn.iter().map(|b| b.1).sum::<f64>() / n as f64;
    let thr = lambda * d_bar;
    let claimant = |j: usize| {
        (0..n)
            .filter(|&i| nn[i].0 == j && nn[i].1 <= thr)
            .min_by(|&a, &b| nn[a].1.total_cmp(&nn[b].1).then(a.cmp(&b)))
    };
    let mut e = Expected { matches: vec![], new_points: vec![], d_bar, reuse: 0 };
    e.reuse = (0..gs.len()).filter(|&j| claimant(j).is_some()).count();
    for (i, &(j, d)) in nn.iter().enumerate() {
        let ok = d <= thr && (policy == MatchPolicy::ManyToOne || claimant(j) == Some(i));
        if ok {
            e.matches.push((i, gs[j].id, d));
        } else {
            e.new_points.push(i);
        }
    }
    e
}

/// Instance `i` of the association suite: even instances sit on a coarse
/// lattice with zero displacement so distance ties are common.
pub fn association_instance(rng: &mut ChaCha8Rng, i: usize) -> (GsFlowField, Vec<Gaussian>, f64) {
    let lattice = i % 2 == 0;
    let pt = |rng: &mut ChaCha8Rng| if lattice { lattice_point(rng) } else { random_point(rng) };
    let n_pts = rng.random_range(0..40);
    let n_gs = rng.random_range(0..40);
    let points: Vec<_> = (0..n_pts).map(|_| pt(rng)).collect();
    let disp: Vec<_> = (0..n_pts)
        .map(|_| if lattice { Vector3::zeros() } else { random_point(rng) * 0.05 })
        .collect();
    let gs = (0..n_gs).map(|j| Gaussian::new_dynamic(100 + j as u64, pt(rng), 0)).collect();
    let lambda = [0.0, 0.01, 0.05, 0.5, 1.0, 3.0][i % 6];
    (field(points, disp), gs, lambda)
}

/// Runs instance `instance` through both match policies against the
/// brute-force oracle.
pub fn check_association_instance(rng: &mut ChaCha8Rng, instance: usize) -> Result<(), String> {
    let (flow, gs, lambda) = association_instance(rng, instance);
    for policy in [MatchPolicy::OneToOne, MatchPolicy::ManyToOne] {
        let got = associate_dynamic_with(&flow, &gs, lambda, policy);
        let want = brute_force_association(&flow, &gs, lambda, policy);
        let got_matches: Vec<_> = got.matches.iter().map(|m| (m.point, m.gaussian_id, m.distance)).collect();
        if got_matches != want.matches
            || got.new_points != want.new_points
            || got.d_bar != want.d_bar
            || got.reuse_count != want.reuse
            || got.matches.len() + got.new_points.len() != flow.len()
        {
            return Err(format!("instance {instance} {policy:?} differs from brute force"));
        }
    }
    Ok(())
}
