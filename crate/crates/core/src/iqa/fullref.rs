//! Full-reference fidelity metrics on [0,1] RGB images.

use crate::error::{Result, UieError};
use crate::image::Image;

/// Cap returned for a zero-error pair, where the ratio diverges.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB: 10·log10(1 / MSE) over all 3HW
/// components of [0,1] data; identical images return [`PSNR_CAP_DB`].
pub fn psnr(pred: &Image, target: &Image) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(UieError::Shape("psnr on mismatched shapes".into()));
    }
    let n = pred.pixels().len() as f64;
    let mse: f64 = pred
        .pixels()
        .iter()
        .zip(target.pixels())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean structural similarity over the luminance channel with an 11×11
/// Gaussian window (σ = 1.5), evaluated at fully interior positions.
pub fn ssim(pred: &Image, target: &Image) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(UieError::Shape("ssim on mismatched shapes".into()));
    }
    let (h, w) = (pred.height(), pred.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(UieError::Size(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let la: Vec<f64> = pred.luminance().iter().map(|&v| v as f64).collect();
    let lb: Vec<f64> = target.luminance().iter().map(|&v| v as f64).collect();
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    let mut acc = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - SSIM_WINDOW) {
        for x0 in 0..=(w - SSIM_WINDOW) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let k = win[wy * SSIM_WINDOW + wx];
                    let idx = (y0 + wy) * w + (x0 + wx);
                    mu_a += k * la[idx];
                    mu_b += k * lb[idx];
                }
            }
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let k = win[wy * SSIM_WINDOW + wx];
                    let idx = (y0 + wy) * w + (x0 + wx);
                    let da = la[idx] - mu_a;
                    let db = lb[idx] - mu_b;
                    var_a += k * da * da;
                    var_b += k * db * db;
                    cov += k * da * db;
                }
            }
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            acc += num / den;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}
