//! Colorimetric no-reference quality index for underwater imagery, built
//! from chroma spread, luminance contrast, and mean saturation in CIELab.

use super::constants::{UCIQE_W_CON_LUM, UCIQE_W_MEAN_SAT, UCIQE_W_SIGMA_CHROMA};
use crate::error::Result;
use crate::image::Image;

/// D65 reference white, taken as the row sums of the conversion matrix
/// below so that the gray axis maps to exactly zero chroma.
const WHITE: [f64; 3] = [0.950_47, 1.000_000_1, 1.088_83];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA3: f64 = (6.0 / 29.0) * (6.0 / 29.0) * (6.0 / 29.0);
    if t > DELTA3 {
        t.cbrt()
    } else {
        t / (3.0 * (6.0 / 29.0) * (6.0 / 29.0)) + 4.0 / 29.0
    }
}

/// sRGB in [0,1] to CIELab (L in [0,100]) under D65.
pub(crate) fn lab_pixel(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let (rl, gl, bl) = (srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b));
    let x = 0.412_456_4 * rl + 0.357_576_1 * gl + 0.180_437_5 * bl;
    let y = 0.212_672_9 * rl + 0.715_152_2 * gl + 0.072_175_0 * bl;
    let z = 0.019_333_9 * rl + 0.119_192_0 * gl + 0.950_304_1 * bl;
    let fx = lab_f(x / WHITE[0]);
    let fy = lab_f(y / WHITE[1]);
    let fz = lab_f(z / WHITE[2]);
    (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// Linear-interpolated percentile of already sorted data, q in [0,1].
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// The three aggregated terms behind [`uciqe`], before weighting.
/// Luminance and chroma are rescaled by 1/100 so every term lives on a
/// comparable O(1) range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UciqeComponents {
    /// Population standard deviation of chroma.
    pub sigma_chroma: f64,
    /// Spread between the 99th and 1st luminance percentiles.
    pub con_lum: f64,
    /// Mean saturation, chroma relative to the chroma–luminance norm.
    pub mean_sat: f64,
}

/// Per-term breakdown of the colorimetric index.
pub fn uciqe_components(img: &Image) -> Result<UciqeComponents> {
    let n = img.height() * img.width();
    let mut lum = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(n);
    let mut sat_sum = 0.0;
    for px in img.pixels().chunks_exact(3) {
        let (l, a, b) = lab_pixel(px[0] as f64, px[1] as f64, px[2] as f64);
        let l = l / 100.0;
        let c = (a * a + b * b).sqrt() / 100.0;
        let denom = (c * c + l * l).sqrt();
        sat_sum += if denom == 0.0 { 0.0 } else { c / denom };
        lum.push(l);
        chroma.push(c);
    }
    let mean_c = chroma.iter().sum::<f64>() / n as f64;
    let var_c = chroma.iter().map(|c| (c - mean_c).powi(2)).sum::<f64>() / n as f64;
    lum.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(UciqeComponents {
        sigma_chroma: var_c.sqrt(),
        con_lum: percentile_sorted(&lum, 0.99) - percentile_sorted(&lum, 0.01),
        mean_sat: sat_sum / n as f64,
    })
}

/// Weighted colorimetric index; higher is better. Exactly zero on a
/// constant achromatic (gray) image, where every component vanishes.
pub fn uciqe(img: &Image) -> Result<f64> {
    let c = uciqe_components(img)?;
    Ok(UCIQE_W_SIGMA_CHROMA * c.sigma_chroma
        + UCIQE_W_CON_LUM * c.con_lum
        + UCIQE_W_MEAN_SAT * c.mean_sat)
}
