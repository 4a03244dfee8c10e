//! Image quality metrics: PSNR (optionally masked) and SSIM.

use crate::error::{Error, Result};
use crate::image::{check_dims, Image, MaskImage, RgbImage};

/// Reported for identical inputs instead of infinity.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// PSNR with peak 1.0 over all pixels, or over `mask` pixels when given.
pub fn psnr(a: &RgbImage, b: &RgbImage, mask: Option<&MaskImage>) -> Result<f64> {
    check_dims(a, b, "psnr inputs")?;
    if let Some(m) = mask {
        check_dims(a, m, "psnr mask")?;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (pa, pb)) in a.data().iter().zip(b.data()).enumerate() {
        if mask.is_some_and(|m| !m.data()[i]) {
            continue;
        }
        for c in 0..3 {
            let d = pa[c] - pb[c];
            sum += d * d;
        }
        n += 3;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("psnr over an empty pixel set".into()));
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable filter over the fully-contained windows.
fn filter_valid(img: &Image<f64>, k: &[f64; SSIM_WINDOW]) -> Image<f64> {
    let (w, h) = img.dims();
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let rows: Image<f64> = Image::from_fn(ow, h, |x, y| (0..SSIM_WINDOW).map(|i| k[i] * img[(x + i, y)]).sum());
    Image::from_fn(ow, oh, |x, y| (0..SSIM_WINDOW).map(|i| k[i] * rows[(x, y + i)]).sum())
}

fn gray(img: &RgbImage) -> Image<f64> {
    img.map(|p| (p[0] + p[1] + p[2]) / 3.0)
}

/// Mean SSIM of the channel-mean grayscale images, using an 11x11 Gaussian
/// window (sigma 1.5) over the valid region.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_dims(a, b, "ssim inputs")?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}")));
    }
    let (x, y) = (gray(a), gray(b));
    let k = gaussian_kernel();
    let prod = |p: &Image<f64>, q: &Image<f64>| Image::from_fn(w, h, |i, j| p[(i, j)] * q[(i, j)]);
    let mx = filter_valid(&x, &k);
    let my = filter_valid(&y, &k);
    let sxx = filter_valid(&prod(&x, &x), &k);
    let syy = filter_valid(&prod(&y, &y), &k);
    let sxy = filter_valid(&prod(&x, &y), &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx.data()[i], my.data()[i]);
        let vx = sxx.data()[i] - ux * ux;
        let vy = syy.data()[i] - uy * uy;
        let cxy = sxy.data()[i] - ux * uy;
        total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(total / mx.len() as f64)
}
