//! Cubic Hermite motion segments for dynamic Gaussians.
//!
//! A segment spans the previous observed frame (`tau' = 0`) to the current one
//! (`tau' = 1`). Querying outside `[0, 1]` extrapolates along the same cubic.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpline {
    /// Position at the previous frame, meters.
    pub m_minus: Vector3<f64>,
    /// Position at the current frame, meters.
    pub m_plus: Vector3<f64>,
    /// Velocity at the previous frame, meters per frame.
    pub v_minus: Vector3<f64>,
    /// Velocity at the current frame, meters per frame.
    pub v_plus: Vector3<f64>,
    /// Frame index of the current endpoint.
    pub t_anchor: i64,
    /// Frames between the two endpoints (1 for consecutive frames).
    #[serde(default = "unit_span")]
    pub span: f64,
}

fn unit_span() -> f64 {
    1.0
}

impl MotionSpline {
    /// A segment sitting still at `p`.
    pub fn stationary(p: Vector3<f64>, t_anchor: i64) -> Self {
        Self {
            m_minus: p,
            m_plus: p,
            v_minus: Vector3::zeros(),
            v_plus: Vector3::zeros(),
            t_anchor,
            span: 1.0,
        }
    }

    /// Segment-local parameter for frame time `tau`.
    #[inline]
    pub fn local_time(&self, tau: f64) -> f64 {
        (tau - (self.t_anchor as f64 - self.span)) / self.span
    }

    pub fn is_finite(&self) -> bool {
        [self.m_minus, self.m_plus, self.v_minus, self.v_plus]
            .iter()
            .all(|v| v.iter().all(|c| c.is_finite()))
            && self.span.is_finite()
    }
}

/// Hermite basis `(h00, h10, h01, h11)` at `s`.
#[inline]
pub fn hermite_basis(s: f64) -> [f64; 4] {
    let s2 = s * s;
    let s3 = s2 * s;
    [
        2.0 * s3 - 3.0 * s2 + 1.0,
        s3 - 2.0 * s2 + s,
        -2.0 * s3 + 3.0 * s2,
        s3 - s2,
    ]
}

/// Position of a dynamic Gaussian's mean at continuous frame time `tau`.
pub fn query_mean(spline: &MotionSpline, tau: f64) -> Result<Vector3<f64>> {
    if !tau.is_finite() {
        return Err(Error::InvalidParameter(format!("query time {tau} is not finite")));
    }
    Ok(eval_segment(spline, tau))
}

#[inline]
pub(crate) fn eval_segment(spline: &MotionSpline, tau: f64) -> Vector3<f64> {
    let [h00, h10, h01, h11] = hermite_basis(spline.local_time(tau));
    // velocities are per frame; the segment parameter advances 1/span per frame
    let v_minus = spline.v_minus * spline.span;
    let v_plus = spline.v_plus * spline.span;
    spline.m_minus * h00 + v_minus * h10 + spline.m_plus * h01 + v_plus * h11
}

/// Segment implied by an update, without touching any Gaussian state.
///
/// `flow` is the matched displacement that carries the current point back
/// to its position `gap` frames earlier.
pub fn build_segment(
    mean_prev: Vector3<f64>,
    mean_curr: Vector3<f64>,
    flow: Vector3<f64>,
    v_prev_plus: Option<Vector3<f64>>,
    t: i64,
    gap: i64,
) -> Result<MotionSpline> {
    let finite = |v: &Vector3<f64>| v.iter().all(|c| c.is_finite());
    if !finite(&mean_prev) || !finite(&mean_curr) || !finite(&flow) {
        return Err(Error::InvalidParameter("non-finite spline update input".into()));
    }
    if let Some(v) = v_prev_plus {
        if !finite(&v) {
            return Err(Error::InvalidParameter("non-finite previous velocity".into()));
        }
    }
    if gap < 1 || t < 1 {
        return Err(Error::InvalidParameter(format!(
            "spline anchor {t} with frame gap {gap} is invalid"
        )));
    }
    let v_minus = -flow / gap as f64;
    let v_plus = match v_prev_plus {
        // constant acceleration: continue the velocity sequence linearly
        Some(prev) => v_minus * 2.0 - prev,
        None => v_minus,
    };
    Ok(MotionSpline {
        m_minus: mean_prev,
        m_plus: mean_curr,
        v_minus,
        v_plus,
        t_anchor: t,
        span: gap as f64,
    })
}

/// Analytic spline update after a frame has been associated and optimized.
pub fn update_spline(
    g: &mut Gaussian,
    mean_prev_optimized: Vector3<f64>,
    mean_curr_optimized: Vector3<f64>,
    flow: Vector3<f64>,
    t: i64,
) -> Result<()> {
    update_spline_with_gap(g, mean_prev_optimized, mean_curr_optimized, flow, t, 1)
}

/// As [`update_spline`] for frames that are `gap` frames apart.
pub fn update_spline_with_gap(
    g: &mut Gaussian,
    mean_prev_optimized: Vector3<f64>,
    mean_curr_optimized: Vector3<f64>,
    flow: Vector3<f64>,
    t: i64,
    gap: i64,
) -> Result<()> {
    if g.kind != GaussianKind::Dynamic {
        return Err(Error::InvalidParameter(format!(
            "gaussian {} is static; only dynamic gaussians carry a spline",
            g.id
        )));
    }
    let seg = build_segment(
        mean_prev_optimized,
        mean_curr_optimized,
        flow,
        g.v_prev_plus,
        t,
        gap,
    )?;
    g.v_prev_plus = Some(seg.v_plus);
    g.mean = seg.m_plus;
    g.spline = Some(seg);
    Ok(())
}
