//! Real spherical harmonics up to degree 3 for view-dependent splat color.
//!
//! Coefficients are stored basis-major: `sh[b]` holds the RGB weights of
//! basis function `b`. Colors are offset by `+0.5` and clamped to `[0, 1]`.

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_SH_DEGREE: u8 = 3;

/// Number of basis terms for `degree`: `(degree + 1)^2`.
pub fn basis_count(degree: u8) -> Result<usize> {
    if degree > MAX_SH_DEGREE {
        return Err(Error::InvalidParameter(format!(
            "sh degree {degree} exceeds {MAX_SH_DEGREE}"
        )));
    }
    Ok((degree as usize + 1).pow(2))
}

/// Inverse of [`basis_count`].
pub fn degree_for_count(n: usize) -> Result<u8> {
    match n {
        1 => Ok(0),
        4 => Ok(1),
        9 => Ok(2),
        16 => Ok(3),
        _ => Err(Error::Shape(format!("{n} sh coefficients match no degree"))),
    }
}

/// Basis values and their partial derivatives with respect to the (not
/// renormalized) direction components. Only the first `basis_count(degree)`
/// entries are meaningful.
pub(crate) fn basis_with_grad(degree: u8, d: &Vector3<f64>) -> ([f64; 16], [[f64; 3]; 16]) {
    let mut y = [0.0; 16];
    let mut g = [[0.0; 3]; 16];
    y[0] = SH_C0;
    if degree == 0 {
        return (y, g);
    }
    let (x, yy, z) = (d.x, d.y, d.z);
    y[1] = -SH_C1 * yy;
    g[1] = [0.0, -SH_C1, 0.0];
    y[2] = SH_C1 * z;
    g[2] = [0.0, 0.0, SH_C1];
    y[3] = -SH_C1 * x;
    g[3] = [-SH_C1, 0.0, 0.0];
    if degree == 1 {
        return (y, g);
    }
    let (xx, y2, zz) = (x * x, yy * yy, z * z);
    y[4] = SH_C2[0] * x * yy;
    g[4] = [SH_C2[0] * yy, SH_C2[0] * x, 0.0];
    y[5] = SH_C2[1] * yy * z;
    g[5] = [0.0, SH_C2[1] * z, SH_C2[1] * yy];
    y[6] = SH_C2[2] * (2.0 * zz - xx - y2);
    g[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * yy, 4.0 * SH_C2[2] * z];
    y[7] = SH_C2[3] * x * z;
    g[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
    y[8] = SH_C2[4] * (xx - y2);
    g[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * yy, 0.0];
    if degree == 2 {
        return (y, g);
    }
    y[9] = SH_C3[0] * yy * (3.0 * xx - y2);
    g[9] = [
        SH_C3[0] * 6.0 * x * yy,
        SH_C3[0] * (3.0 * xx - 3.0 * y2),
        0.0,
    ];
    y[10] = SH_C3[1] * x * yy * z;
    g[10] = [SH_C3[1] * yy * z, SH_C3[1] * x * z, SH_C3[1] * x * yy];
    y[11] = SH_C3[2] * yy * (4.0 * zz - xx - y2);
    g[11] = [
        SH_C3[2] * (-2.0 * x * yy),
        SH_C3[2] * (4.0 * zz - xx - 3.0 * y2),
        SH_C3[2] * 8.0 * yy * z,
    ];
    y[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * y2);
    g[12] = [
        SH_C3[3] * (-6.0 * x * z),
        SH_C3[3] * (-6.0 * yy * z),
        SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * y2),
    ];
    y[13] = SH_C3[4] * x * (4.0 * zz - xx - y2);
    g[13] = [
        SH_C3[4] * (4.0 * zz - 3.0 * xx - y2),
        SH_C3[4] * (-2.0 * x * yy),
        SH_C3[4] * 8.0 * x * z,
    ];
    y[14] = SH_C3[5] * z * (xx - y2);
    g[14] = [
        SH_C3[5] * 2.0 * x * z,
        SH_C3[5] * (-2.0 * yy * z),
        SH_C3[5] * (xx - y2),
    ];
    y[15] = SH_C3[6] * x * (xx - 3.0 * y2);
    g[15] = [
        SH_C3[6] * (3.0 * xx - 3.0 * y2),
        SH_C3[6] * (-6.0 * x * yy),
        0.0,
    ];
    (y, g)
}

/// Color seen along `view_dir` (unit vector from camera toward the splat).
pub fn eval_sh(sh: &[[f64; 3]], view_dir: &Vector3<f64>, degree: u8) -> Result<[f64; 3]> {
    let n = basis_count(degree)?;
    if sh.len() != n {
        return Err(Error::Shape(format!(
            "degree {degree} needs {n} sh coefficients, got {}",
            sh.len()
        )));
    }
    let (basis, _) = basis_with_grad(degree, view_dir);
    Ok(eval_raw(sh, &basis).map(|c| c.clamp(0.0, 1.0)))
}

/// Unclamped `sum_b Y_b sh_b + 0.5`.
#[inline]
pub(crate) fn eval_raw(sh: &[[f64; 3]], basis: &[f64; 16]) -> [f64; 3] {
    let mut out = [0.5; 3];
    for (coef, y) in sh.iter().zip(basis.iter()) {
        for c in 0..3 {
            out[c] += y * coef[c];
        }
    }
    out
}

/// Degree-0 coefficient that decodes to `rgb`.
pub fn dc_from_rgb(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| (c - 0.5) / SH_C0)
}
