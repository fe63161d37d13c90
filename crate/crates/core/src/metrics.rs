//! Image quality metrics: PSNR and single-scale SSIM.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Peak signal-to-noise ratio in dB. Identical images are reported as a
/// 99 dB cap rather than infinity.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, peak: f32) -> Result<f32> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "psnr: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.numel() == 0 {
        return Err(Error::InvalidArgument("psnr: empty image".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(99.0);
    }
    let db = 10.0 * ((peak as f64 * peak as f64) / mse).log10();
    Ok(db.min(99.0) as f32)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 1e-4; // (0.01)^2
const SSIM_C2: f64 = 9e-4; // (0.03)^2

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Converts [H,W,3] to grayscale by channel mean; passes [H,W] through.
fn to_gray(img: &Tensor<f32>) -> Result<Vec<f64>> {
    match img.shape() {
        [h, w] => {
            let _ = (h, w);
            Ok(img.data().iter().map(|&v| v as f64).collect())
        }
        [h, w, 3] => {
            let mut out = Vec::with_capacity(h * w);
            for pix in 0..h * w {
                let s = img.data()[pix * 3] + img.data()[pix * 3 + 1] + img.data()[pix * 3 + 2];
                out.push(s as f64 / 3.0);
            }
            Ok(out)
        }
        other => Err(Error::ShapeMismatch(format!(
            "ssim expects [H,W] or [H,W,3], got {other:?}"
        ))),
    }
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5) over valid
/// (fully interior) windows, on [0,1]-range images.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f32> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "ssim: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let ga = to_gray(a)?;
    let gb = to_gray(b)?;
    let win = gaussian_window();
    let half = SSIM_WINDOW / 2;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for cy in half..h - half {
        for cx in half..w - half {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for dy in 0..SSIM_WINDOW {
                let wy = win[dy];
                let row = (cy + dy - half) * w;
                for dx in 0..SSIM_WINDOW {
                    let wgt = wy * win[dx];
                    let va = ga[row + cx + dx - half];
                    let vb = gb[row + cx + dx - half];
                    mu_a += wgt * va;
                    mu_b += wgt * vb;
                    aa += wgt * va * va;
                    bb += wgt * vb * vb;
                    ab += wgt * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
            total += s;
            count += 1;
        }
    }
    Ok((total / count as f64) as f32)
}
