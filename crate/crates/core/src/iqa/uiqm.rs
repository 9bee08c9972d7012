//! Composite no-reference underwater quality measure combining a
//! colorfulness term, a sharpness term, and a block-contrast term.

use super::constants::{
    LUMA_B, LUMA_G, LUMA_R, UICM_ALPHA_TRIM, UICM_W_MU, UICM_W_SIGMA, UIQM_BLOCK, UIQM_W_COLOR,
    UIQM_W_CONTRAST, UIQM_W_SHARP,
};
use crate::error::{Result, UieError};
use crate::image::Image;

/// The three aggregated terms behind [`uiqm`], before weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UiqmComponents {
    /// Colorfulness: penalizes chromatic bias, rewards chromatic spread.
    pub uicm: f64,
    /// Sharpness: luma-weighted block log-contrast of edge-enhanced channels.
    pub uism: f64,
    /// Contrast: mean entropy-style Michelson contrast over blocks.
    pub uiconm: f64,
}

/// Alpha-trimmed mean plus second moment about it over all samples.
fn trimmed_stats(values: &[f64], alpha: f64) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let cut = (alpha * n as f64).floor() as usize;
    let kept = &sorted[cut..n - cut];
    let mu = kept.iter().sum::<f64>() / kept.len() as f64;
    let sigma2 = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
    (mu, sigma2)
}

/// Sobel gradient magnitude with clamp-to-edge padding.
fn sobel_magnitude(chan: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: i64, x: i64| -> f64 {
        let y = y.clamp(0, h as i64 - 1) as usize;
        let x = x.clamp(0, w as i64 - 1) as usize;
        chan[y * w + x]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = -at(y - 1, x - 1) + at(y - 1, x + 1) - 2.0 * at(y, x - 1)
                + 2.0 * at(y, x + 1)
                - at(y + 1, x - 1)
                + at(y + 1, x + 1);
            let gy = -at(y - 1, x - 1) - 2.0 * at(y - 1, x) - at(y - 1, x + 1)
                + at(y + 1, x - 1)
                + 2.0 * at(y + 1, x)
                + at(y + 1, x + 1);
            out[(y as usize) * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Log measure of enhancement over non-overlapping blocks; blocks whose
/// extremes would make the log ratio undefined are skipped.
fn eme(map: &[f64], h: usize, w: usize, block: usize) -> f64 {
    let (k2, k1) = (h / block, w / block);
    let mut acc = 0.0;
    for by in 0..k2 {
        for bx in 0..k1 {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for y in by * block..(by + 1) * block {
                for x in bx * block..(bx + 1) * block {
                    let v = map[y * w + x];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            if lo > 0.0 && hi > 0.0 {
                acc += (hi / lo).ln();
            }
        }
    }
    2.0 / (k1 * k2) as f64 * acc
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.pixels()
        .chunks_exact(3)
        .map(|px| px[c] as f64)
        .collect()
}

/// Per-term breakdown of the composite measure. Requires the image to
/// contain at least one full block in each direction.
pub fn uiqm_components(img: &Image) -> Result<UiqmComponents> {
    let (h, w) = (img.height(), img.width());
    if h < UIQM_BLOCK || w < UIQM_BLOCK {
        return Err(UieError::Size(format!(
            "composite quality measure needs at least {UIQM_BLOCK}x{UIQM_BLOCK}, got {h}x{w}"
        )));
    }
    let r = channel(img, 0);
    let g = channel(img, 1);
    let b = channel(img, 2);

    // Colorfulness on the two opponent axes.
    let rg: Vec<f64> = r.iter().zip(&g).map(|(r, g)| r - g).collect();
    let yb: Vec<f64> = r
        .iter()
        .zip(g.iter().zip(&b))
        .map(|(r, (g, b))| (r + g) / 2.0 - b)
        .collect();
    let (mu_rg, var_rg) = trimmed_stats(&rg, UICM_ALPHA_TRIM);
    let (mu_yb, var_yb) = trimmed_stats(&yb, UICM_ALPHA_TRIM);
    let uicm = UICM_W_MU * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt()
        + UICM_W_SIGMA * (var_rg + var_yb).sqrt();

    // Sharpness: block log-contrast of each edge-enhanced channel.
    let mut uism = 0.0;
    for (chan, weight) in [(&r, LUMA_R), (&g, LUMA_G), (&b, LUMA_B)] {
        let edges = sobel_magnitude(chan, h, w);
        let enhanced: Vec<f64> = chan.iter().zip(&edges).map(|(c, e)| c * e).collect();
        uism += weight * eme(&enhanced, h, w, UIQM_BLOCK);
    }

    // Contrast: entropy-style Michelson contrast over joint-channel blocks.
    let (k2, k1) = (h / UIQM_BLOCK, w / UIQM_BLOCK);
    let mut acc = 0.0;
    for by in 0..k2 {
        for bx in 0..k1 {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for y in by * UIQM_BLOCK..(by + 1) * UIQM_BLOCK {
                for x in bx * UIQM_BLOCK..(bx + 1) * UIQM_BLOCK {
                    for chan in [&r, &g, &b] {
                        let v = chan[y * w + x];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            let (top, bot) = (hi - lo, hi + lo);
            if top > 0.0 && bot > 0.0 {
                let m = top / bot;
                acc += m * m.ln();
            }
        }
    }
    let uiconm = -acc / (k1 * k2) as f64;

    Ok(UiqmComponents { uicm, uism, uiconm })
}

/// Weighted composite quality measure; higher is better. Exactly zero on
/// a constant achromatic (gray) image, where every component vanishes.
pub fn uiqm(img: &Image) -> Result<f64> {
    let c = uiqm_components(img)?;
    Ok(UIQM_W_COLOR * c.uicm + UIQM_W_SHARP * c.uism + UIQM_W_CONTRAST * c.uiconm)
}
