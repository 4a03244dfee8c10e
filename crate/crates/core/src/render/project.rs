//! Per-splat projection into screen space (EWA approximation).

use nalgebra::{Matrix2x3, Matrix3, Vector3};

use crate::error::Result;
use crate::gaussian::{covariance_from_parts, effective_scales, Gaussian};
use crate::geometry::{quat_to_matrix, CameraModel, CameraView};
use crate::render::RenderSettings;
use crate::sh::{basis_with_grad, degree_for_count, eval_raw};

/// A splat after projection, ready for blending.
#[derive(Clone, Debug, PartialEq)]
pub struct Projected2D {
    /// Position of the splat in the slice handed to the renderer.
    pub index: usize,
    pub id: u64,
    pub mean2d: [f64; 2],
    /// Dilated screen covariance `(xx, xy, yy)`, pixels^2.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d`, `(xx, xy, yy)`.
    pub conic: [f64; 3],
    /// Camera-frame z of the mean, meters.
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Channels whose SH value was clamped (zero color gradient).
    pub(crate) clamped: [bool; 3],
    pub(crate) cam_pos: Vector3<f64>,
    pub(crate) world_pos: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Visible(Projected2D),
    Culled,
    /// Screen covariance too ill-conditioned to invert safely.
    Singular,
}

/// Pinhole Jacobian of `(u, v)` with respect to the camera-frame point.
#[inline]
pub(crate) fn pinhole_jacobian(cam: &CameraModel, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz2,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz2,
    )
}

/// Camera-frame covariance `W Sigma W^T` of a splat.
#[inline]
pub(crate) fn camera_covariance(g: &Gaussian, view: &CameraView) -> (Matrix3<f64>, Matrix3<f64>, [f64; 3], usize) {
    let r = quat_to_matrix(&g.rotation);
    let (s, flat) = effective_scales(&g.log_scale);
    let sigma = covariance_from_parts(&r, &s);
    let m = view.world_to_cam * sigma * view.cam_to_world;
    (m, r, s, flat)
}

pub fn project_gaussian(
    g: &Gaussian,
    index: usize,
    cam: &CameraModel,
    view: &CameraView,
    tau: f64,
    settings: &RenderSettings,
) -> Result<Projection> {
    let degree = degree_for_count(g.sh.len())?;
    let world_pos = g.position_at(tau);
    let t = view.to_camera(&world_pos);
    // NaN positions fail this comparison too
    if !(t.z > settings.near_clip) || !t.x.is_finite() || !t.y.is_finite() {
        return Ok(Projection::Culled);
    }
    let u = cam.fx * t.x / t.z + cam.cx;
    let v = cam.fy * t.y / t.z + cam.cy;

    let (m, _, _, _) = camera_covariance(g, view);
    let j = pinhole_jacobian(cam, &t);
    let jm = j * m;
    let cxx = jm.row(0).dot(&j.row(0)) + settings.dilation;
    let cxy = jm.row(0).dot(&j.row(1));
    let cyy = jm.row(1).dot(&j.row(1)) + settings.dilation;

    let mid = 0.5 * (cxx + cyy);
    let rad = (0.25 * (cxx - cyy) * (cxx - cyy) + cxy * cxy).sqrt();
    let (lmax, lmin) = (mid + rad, mid - rad);
    if !(lmin > 0.0) || !(lmax / lmin <= settings.max_condition) {
        return Ok(Projection::Singular);
    }

    let (sx, sy) = (cxx.sqrt(), cyy.sqrt());
    let k = settings.cull_sigma;
    let (w, h) = (cam.width as f64, cam.height as f64);
    if u < -0.5 - k * sx || u > w - 0.5 + k * sx || v < -0.5 - k * sy || v > h - 0.5 + k * sy {
        return Ok(Projection::Culled);
    }

    let det = cxx * cyy - cxy * cxy;
    let conic = [cyy / det, -cxy / det, cxx / det];

    let dir = (world_pos - view.center).normalize();
    let (basis, _) = basis_with_grad(degree, &dir);
    let raw = eval_raw(&g.sh, &basis);
    let color = raw.map(|c| c.clamp(0.0, 1.0));
    let clamped = [0, 1, 2].map(|c| raw[c] < 0.0 || raw[c] > 1.0);

    Ok(Projection::Visible(Projected2D {
        index,
        id: g.id,
        mean2d: [u, v],
        cov2d: [cxx, cxy, cyy],
        conic,
        depth: t.z,
        opacity: g.opacity(),
        color,
        clamped,
        cam_pos: t,
        world_pos,
    }))
}
