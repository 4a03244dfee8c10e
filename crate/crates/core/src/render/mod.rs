//! Tile-based splat rasterizer: front-to-back alpha blending for color,
//! first-surface selection for depth, and the matching backward pass.

mod backward;
mod project;

use rayon::prelude::*;

pub use backward::{render_backward, SplatGrad};
pub use project::{project_gaussian, Projected2D, Projection};

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianMap};
use crate::geometry::{CameraModel, CameraView, Pose};
use crate::image::{DepthImage, Image, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    /// Blended-weight threshold that selects the depth surface.
    pub lambda_alpha: f64,
    pub near_clip: f64,
    /// Added to both diagonal entries of the screen covariance, pixels^2.
    pub dilation: f64,
    /// Contributors with `f` below this are skipped.
    pub min_alpha: f64,
    /// Blending stops once transmittance falls below this.
    pub min_transmittance: f64,
    pub tile_size: usize,
    pub max_condition: f64,
    /// Splats whose center lies more than this many sigmas off-image are culled.
    pub cull_sigma: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            lambda_alpha: 0.1,
            near_clip: 0.05,
            dilation: 0.3,
            min_alpha: 1.0 / 255.0,
            min_transmittance: 1e-4,
            tile_size: 16,
            max_condition: 1e12,
            cull_sigma: 3.0,
        }
    }
}

impl RenderSettings {
    pub fn with_lambda_alpha(lambda_alpha: f64) -> Self {
        Self {
            lambda_alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_alpha > 0.0
            && self.lambda_alpha < 1.0
            && self.near_clip > 0.0
            && self.dilation >= 0.0
            && self.min_alpha > 0.0
            && self.min_alpha < 1.0
            && self.min_transmittance >= 0.0
            && self.tile_size > 0
            && self.max_condition > 1.0
            && self.cull_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("bad render settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub rgb: RgbImage,
    /// Surface depth, meters; 0 where no contributor reached `lambda_alpha`.
    pub depth: DepthImage,
    /// Accumulated opacity `1 - T_final`.
    pub alpha: DepthImage,
    pub contributors: Image<u32>,
    /// Largest blended weight `f * T` each splat reached at any pixel,
    /// indexed like the splat slice.
    pub max_weight: Vec<f64>,
    pub n_visible: usize,
    pub n_culled: usize,
    pub n_singular: usize,
}

/// Intermediate state of a forward pass, consumed by [`render_backward`].
#[derive(Clone, Debug)]
pub struct ForwardState {
    pub(crate) projected: Vec<Projected2D>,
    /// Per tile, positions into `projected` in blending order.
    pub(crate) tiles: Vec<Vec<u32>>,
    pub(crate) tiles_x: usize,
    pub(crate) width: usize,
    pub(crate) height: usize,
    pub(crate) n_splats: usize,
    pub(crate) tau: f64,
    pub(crate) pose: Pose,
    pub(crate) settings: RenderSettings,
}

impl ForwardState {
    /// Projected splats in global blending order.
    pub fn projected(&self) -> &[Projected2D] {
        &self.projected
    }

    pub(crate) fn tile_rect(&self, tile: usize) -> (usize, usize, usize, usize) {
        let ts = self.settings.tile_size;
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let x0 = tx * ts;
        let y0 = ty * ts;
        (x0, y0, (x0 + ts).min(self.width), (y0 + ts).min(self.height))
    }

    pub(crate) fn check_matches(&self, n_splats: usize, cam: &CameraModel, pose: &Pose, tau: f64) -> Result<()> {
        if self.n_splats != n_splats
            || self.width != cam.width
            || self.height != cam.height
            || self.pose != *pose
            || self.tau.to_bits() != tau.to_bits()
        {
            return Err(Error::ContractViolation(
                "forward state does not belong to this render call".into(),
            ));
        }
        Ok(())
    }
}

/// One contributor met while walking a pixel front to back.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Hit {
    /// Position in the tile's list.
    pub slot: u32,
    pub f: f64,
    /// Transmittance before this contributor.
    pub t: f64,
    pub dx: f64,
    pub dy: f64,
}

/// Gaussian falloff and weight of a projected splat at pixel `(px, py)`.
#[inline(always)]
pub(crate) fn splat_weight(p: &Projected2D, px: f64, py: f64) -> (f64, f64, f64) {
    let dx = px - p.mean2d[0];
    let dy = py - p.mean2d[1];
    let q = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
    (p.opacity * (-0.5 * q).exp(), dx, dy)
}

/// Walks one pixel's contributor list, calling `visit` for each blended hit.
/// Returns the final transmittance.
#[inline]
pub(crate) fn walk_pixel(
    projected: &[Projected2D],
    list: &[u32],
    px: f64,
    py: f64,
    settings: &RenderSettings,
    mut visit: impl FnMut(&Projected2D, Hit),
) -> f64 {
    let mut t = 1.0;
    for (slot, &i) in list.iter().enumerate() {
        let p = &projected[i as usize];
        let (f, dx, dy) = splat_weight(p, px, py);
        if f < settings.min_alpha {
            continue;
        }
        visit(
            p,
            Hit {
                slot: slot as u32,
                f,
                t,
                dx,
                dy,
            },
        );
        t *= 1.0 - f;
        if t < settings.min_transmittance {
            break;
        }
    }
    t
}

/// Projects every splat, sorts front to back by `(depth, id)`.
fn project_all(
    splats: &[&Gaussian],
    cam: &CameraModel,
    pose: &Pose,
    tau: f64,
    settings: &RenderSettings,
) -> Result<(Vec<Projected2D>, usize, usize)> {
    let view = CameraView::new(pose);
    let outcomes: Vec<Projection> = splats
        .par_iter()
        .enumerate()
        .map(|(i, g)| project_gaussian(g, i, cam, &view, tau, settings))
        .collect::<Result<_>>()?;
    let mut projected = Vec::with_capacity(outcomes.len());
    let (mut culled, mut singular) = (0, 0);
    for o in outcomes {
        match o {
            Projection::Visible(p) => projected.push(p),
            Projection::Culled => culled += 1,
            Projection::Singular => singular += 1,
        }
    }
    projected.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id)));
    Ok((projected, culled, singular))
}

/// Pixel-center range a splat can reach with `f >= min_alpha`, or `None`.
fn splat_pixel_bounds(p: &Projected2D, cam: &CameraModel, settings: &RenderSettings) -> Option<[usize; 4]> {
    if p.opacity < settings.min_alpha {
        return None;
    }
    // f >= min_alpha  <=>  d^T conic d <= 2 ln(opacity / min_alpha)
    let q = 2.0 * (p.opacity / settings.min_alpha).ln();
    let ex = (q * p.cov2d[0]).sqrt() * (1.0 + 1e-6) + 1e-3;
    let ey = (q * p.cov2d[2]).sqrt() * (1.0 + 1e-6) + 1e-3;
    let x0 = (p.mean2d[0] - ex).ceil().max(0.0);
    let x1 = (p.mean2d[0] + ex).floor().min(cam.width as f64 - 1.0);
    let y0 = (p.mean2d[1] - ey).ceil().max(0.0);
    let y1 = (p.mean2d[1] + ey).floor().min(cam.height as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some([x0 as usize, y0 as usize, x1 as usize, y1 as usize])
}

/// Renders an arbitrary list of splats and returns the state needed for
/// the backward pass.
pub fn render_splats(
    splats: &[&Gaussian],
    cam: &CameraModel,
    pose: &Pose,
    tau: f64,
    settings: &RenderSettings,
) -> Result<(RenderOutput, ForwardState)> {
    settings.validate()?;
    if !tau.is_finite() {
        return Err(Error::InvalidParameter(format!("render time {tau} is not finite")));
    }
    let (projected, n_culled, n_singular) = project_all(splats, cam, pose, tau, settings)?;

    let ts = settings.tile_size;
    let tiles_x = cam.width.div_ceil(ts);
    let tiles_y = cam.height.div_ceil(ts);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, p) in projected.iter().enumerate() {
        if let Some([x0, y0, x1, y1]) = splat_pixel_bounds(p, cam, settings) {
            for ty in y0 / ts..=y1 / ts {
                for tx in x0 / ts..=x1 / ts {
                    tiles[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
    }

    let state = ForwardState {
        projected,
        tiles,
        tiles_x,
        width: cam.width,
        height: cam.height,
        n_splats: splats.len(),
        tau,
        pose: *pose,
        settings: *settings,
    };

    struct TileOut {
        rgb: Vec<[f64; 3]>,
        depth: Vec<f64>,
        alpha: Vec<f64>,
        count: Vec<u32>,
        max_w: Vec<f64>,
    }

    let lambda = settings.lambda_alpha;
    let outs: Vec<TileOut> = (0..state.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = state.tile_rect(tile);
            let list = &state.tiles[tile];
            let n = (x1 - x0) * (y1 - y0);
            let mut out = TileOut {
                rgb: Vec::with_capacity(n),
                depth: Vec::with_capacity(n),
                alpha: Vec::with_capacity(n),
                count: Vec::with_capacity(n),
                max_w: vec![0.0; list.len()],
            };
            for y in y0..y1 {
                for x in x0..x1 {
                    let mut c = [0.0; 3];
                    let mut depth = 0.0;
                    let mut found = false;
                    let mut count = 0u32;
                    let t = walk_pixel(&state.projected, list, x as f64, y as f64, settings, |p, hit| {
                        let w = hit.f * hit.t;
                        c[0] += p.color[0] * w;
                        c[1] += p.color[1] * w;
                        c[2] += p.color[2] * w;
                        if !found && w > lambda {
                            depth = p.depth;
                            found = true;
                        }
                        let m = &mut out.max_w[hit.slot as usize];
                        if w > *m {
                            *m = w;
                        }
                        count += 1;
                    });
                    out.rgb.push(c);
                    out.depth.push(depth);
                    out.alpha.push(1.0 - t);
                    out.count.push(count);
                }
            }
            out
        })
        .collect();

    let (w, h) = (cam.width, cam.height);
    let mut rgb = Image::new(w, h, [0.0; 3]);
    let mut depth = Image::new(w, h, 0.0);
    let mut alpha = Image::new(w, h, 0.0);
    let mut contributors = Image::new(w, h, 0u32);
    let mut max_weight = vec![0.0f64; splats.len()];
    for (tile, out) in outs.into_iter().enumerate() {
        let (x0, y0, x1, y1) = state.tile_rect(tile);
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                rgb[(x, y)] = out.rgb[k];
                depth[(x, y)] = out.depth[k];
                alpha[(x, y)] = out.alpha[k];
                contributors[(x, y)] = out.count[k];
                k += 1;
            }
        }
        for (slot, &i) in state.tiles[tile].iter().enumerate() {
            let idx = state.projected[i as usize].index;
            if out.max_w[slot] > max_weight[idx] {
                max_weight[idx] = out.max_w[slot];
            }
        }
    }

    let output = RenderOutput {
        rgb,
        depth,
        alpha,
        contributors,
        max_weight,
        n_visible: state.projected.len(),
        n_culled,
        n_singular,
    };
    Ok((output, state))
}

/// Jointly renders the static and dynamic sets of `map` at frame time `tau`.
/// Splat order is static set followed by dynamic set.
pub fn render(
    map: &GaussianMap,
    cam: &CameraModel,
    pose: &Pose,
    tau: f64,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    let splats: Vec<&Gaussian> = map.iter().collect();
    Ok(render_splats(&splats, cam, pose, tau, settings)?.0)
}

pub fn render_rgb(map: &GaussianMap, cam: &CameraModel, pose: &Pose, tau: f64) -> Result<RgbImage> {
    let settings = RenderSettings::with_lambda_alpha(map.config.lambda_alpha);
    Ok(render(map, cam, pose, tau, &settings)?.rgb)
}

pub fn render_depth(
    map: &GaussianMap,
    cam: &CameraModel,
    pose: &Pose,
    tau: f64,
    lambda_alpha: f64,
) -> Result<DepthImage> {
    Ok(render(map, cam, pose, tau, &RenderSettings::with_lambda_alpha(lambda_alpha))?.depth)
}
