//! Analytic gradients of the blended color and surface depth with respect to
//! every optimizable splat parameter.
//!
//! Each tile re-walks its pixels front to back, then sweeps the hits in
//! reverse with a running suffix so no division by `1 - f` is needed.
//! Screen-space gradients land in tile-local buffers which are reduced in
//! tile order, making the result independent of the worker count.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::geometry::{quat_to_matrix_backward, CameraModel, CameraView, Pose};
use crate::image::{check_dims, DepthImage, RgbImage};
use crate::render::project::{camera_covariance, pinhole_jacobian, Projected2D};
use crate::render::{walk_pixel, ForwardState, Hit};
use crate::sh::{basis_with_grad, degree_for_count};

/// Gradient of the loss with respect to one splat's raw parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrad {
    /// With respect to the rendered (query-time) world position.
    pub mean: Vector3<f64>,
    /// With respect to the raw quaternion components `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub sh: Vec<[f64; 3]>,
}

impl SplatGrad {
    pub fn zeros(n_sh: usize) -> Self {
        Self {
            mean: Vector3::zeros(),
            rotation: [0.0; 4],
            log_scale: Vector3::zeros(),
            opacity_logit: 0.0,
            sh: vec![[0.0; 3]; n_sh],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.iter().flatten().all(|v| v.is_finite())
    }
}

/// Screen-space gradient accumulator for one projected splat.
#[derive(Clone, Copy, Debug, Default)]
struct ScreenGrad {
    /// Symmetric-matrix gradient of the conic `(xx, xy, yy)`.
    conic: [f64; 3],
    mean2d: [f64; 2],
    /// With respect to activated opacity.
    opacity: f64,
    color: [f64; 3],
    /// With respect to camera-frame z, from the depth image.
    depth: f64,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.mean2d[0] += o.mean2d[0];
        self.mean2d[1] += o.mean2d[1];
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

fn tile_backward(
    state: &ForwardState,
    tile: usize,
    grad_rgb: &RgbImage,
    grad_depth: &DepthImage,
) -> Vec<ScreenGrad> {
    let list = &state.tiles[tile];
    let mut acc = vec![ScreenGrad::default(); list.len()];
    if list.is_empty() {
        return acc;
    }
    let settings = &state.settings;
    let (x0, y0, x1, y1) = state.tile_rect(tile);
    let mut hits: Vec<Hit> = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let g = grad_rgb[(x, y)];
            let gd = grad_depth[(x, y)];
            if g == [0.0; 3] && gd == 0.0 {
                continue;
            }
            hits.clear();
            let mut surface: Option<u32> = None;
            walk_pixel(&state.projected, list, x as f64, y as f64, settings, |_, hit| {
                if surface.is_none() && hit.f * hit.t > settings.lambda_alpha {
                    surface = Some(hit.slot);
                }
                hits.push(hit);
            });
            if let Some(slot) = surface {
                acc[slot as usize].depth += gd;
            }
            let mut suffix = 0.0;
            for hit in hits.iter().rev() {
                let p = &state.projected[list[hit.slot as usize] as usize];
                let gc = g[0] * p.color[0] + g[1] * p.color[1] + g[2] * p.color[2];
                let d_f = hit.t * (gc - suffix);
                suffix = gc * hit.f + (1.0 - hit.f) * suffix;

                let a = &mut acc[hit.slot as usize];
                let w = hit.f * hit.t;
                a.color[0] += g[0] * w;
                a.color[1] += g[1] * w;
                a.color[2] += g[2] * w;
                // f = opacity * exp(-q / 2)
                a.opacity += d_f * (hit.f / p.opacity);
                let d_q = -0.5 * hit.f * d_f;
                let (dx, dy) = (hit.dx, hit.dy);
                a.conic[0] += d_q * dx * dx;
                a.conic[1] += d_q * dx * dy;
                a.conic[2] += d_q * dy * dy;
                let c = &p.conic;
                a.mean2d[0] += d_q * -2.0 * (c[0] * dx + c[1] * dy);
                a.mean2d[1] += d_q * -2.0 * (c[1] * dx + c[2] * dy);
            }
        }
    }
    acc
}

/// Chains a screen-space gradient back to the splat's parameters.
fn splat_backward(
    g: &Gaussian,
    p: &Projected2D,
    sg: &ScreenGrad,
    cam: &CameraModel,
    view: &CameraView,
) -> Result<SplatGrad> {
    let degree = degree_for_count(g.sh.len())?;
    let mut out = SplatGrad::zeros(g.sh.len());

    let o = p.opacity;
    out.opacity_logit = sg.opacity * o * (1.0 - o);

    // color -> sh and view direction
    let diff = p.world_pos - view.center;
    let len = diff.norm();
    let dir = diff / len;
    let (basis, dbasis) = basis_with_grad(degree, &dir);
    let gcol = [0, 1, 2].map(|c| if p.clamped[c] { 0.0 } else { sg.color[c] });
    let mut gdir = Vector3::zeros();
    for (b, coef) in g.sh.iter().enumerate() {
        for c in 0..3 {
            out.sh[b][c] = basis[b] * gcol[c];
        }
        let s = coef[0] * gcol[0] + coef[1] * gcol[1] + coef[2] * gcol[2];
        gdir += Vector3::from(dbasis[b]) * s;
    }
    let g_pos_dir = (gdir - dir * dir.dot(&gdir)) / len;

    // conic -> screen covariance
    let a = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
    let ga = Matrix2::new(sg.conic[0], sg.conic[1], sg.conic[1], sg.conic[2]);
    let gc = -(a * ga * a);

    let t = p.cam_pos;
    let (m, r, s, flat) = camera_covariance(g, view);
    let j = pinhole_jacobian(cam, &t);
    let gm = j.transpose() * gc * j;
    let gj = 2.0 * gc * j * m;

    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut gt = j.transpose() * Vector2::new(sg.mean2d[0], sg.mean2d[1]);
    gt.x += gj[(0, 2)] * (-fx * iz2);
    gt.y += gj[(1, 2)] * (-fy * iz2);
    gt.z += gj[(0, 0)] * (-fx * iz2)
        + gj[(0, 2)] * (2.0 * fx * t.x * iz3)
        + gj[(1, 1)] * (-fy * iz2)
        + gj[(1, 2)] * (2.0 * fy * t.y * iz3);
    gt.z += sg.depth;
    out.mean = view.cam_to_world * gt + g_pos_dir;

    // camera covariance -> world covariance -> rotation and scale
    let g_sigma: Matrix3<f64> = view.cam_to_world * gm * view.world_to_cam;
    let s2 = Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
    let g_r = 2.0 * g_sigma * r * s2;
    let rgr = r.transpose() * g_sigma * r;
    for k in 0..3 {
        if k != flat {
            out.log_scale[k] = 2.0 * s[k] * s[k] * rgr[(k, k)];
        }
    }
    out.rotation = quat_to_matrix_backward(&g.rotation, &g_r);
    Ok(out)
}

/// Gradients of `sum(grad_rgb * rgb) + sum(grad_depth * depth)` for the
/// render described by `state`, indexed like `splats`.
pub fn render_backward(
    splats: &[&Gaussian],
    cam: &CameraModel,
    pose: &Pose,
    tau: f64,
    state: &ForwardState,
    grad_rgb: &RgbImage,
    grad_depth: &DepthImage,
) -> Result<Vec<SplatGrad>> {
    state.check_matches(splats.len(), cam, pose, tau)?;
    if grad_rgb.dims() != (cam.width, cam.height) {
        return Err(Error::ContractViolation("upstream color gradient has wrong size".into()));
    }
    check_dims(grad_rgb, grad_depth, "upstream gradients")
        .map_err(|e| Error::ContractViolation(e.to_string()))?;

    let per_tile: Vec<Vec<ScreenGrad>> = (0..state.tiles.len())
        .into_par_iter()
        .map(|tile| tile_backward(state, tile, grad_rgb, grad_depth))
        .collect();

    let mut screen = vec![ScreenGrad::default(); state.projected.len()];
    for (tile, acc) in per_tile.iter().enumerate() {
        for (slot, &i) in state.tiles[tile].iter().enumerate() {
            screen[i as usize].add(&acc[slot]);
        }
    }

    let view = CameraView::new(pose);
    let chained: Vec<SplatGrad> = state
        .projected
        .par_iter()
        .zip(screen.par_iter())
        .map(|(p, sg)| splat_backward(splats[p.index], p, sg, cam, &view))
        .collect::<Result<_>>()?;

    let mut grads: Vec<Option<SplatGrad>> = vec![None; splats.len()];
    for (p, g) in state.projected.iter().zip(chained) {
        grads[p.index] = Some(g);
    }
    Ok(grads
        .into_iter()
        .zip(splats)
        .map(|(g, s)| g.unwrap_or_else(|| SplatGrad::zeros(s.sh.len())))
        .collect())
}
