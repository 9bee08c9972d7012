//! Naturalness metric: distance between an image's normalized-coefficient
//! statistics and a model fitted on a corpus of clean images.
//!
//! Luminance is rescaled to [0,255], locally normalized with a 7×7
//! Gaussian (mean-subtracted, contrast-divided), and summarized by 18
//! asymmetric generalized Gaussian features: two from the coefficients
//! themselves and four from each of the four neighbor-product maps.
//! The whole image contributes one feature vector (no patch selection),
//! and the score is the Mahalanobis distance to the corpus mean under
//! the regularized corpus covariance.

use crate::error::{Result, UieError};
use crate::image::Image;
use statrs::function::gamma::gamma;
use std::sync::OnceLock;

/// Length of the statistical feature vector.
pub const NIQE_FEATURES: usize = 18;
/// Minimum corpus size accepted by [`niqe_fit`].
pub const NIQE_MIN_FIT: usize = 10;
/// Ridge added to the covariance diagonal before inversion.
const COV_RIDGE: f64 = 1e-6;
/// Contrast stabilizer in the local normalization.
const MSCN_C: f64 = 1.0;
const WINDOW: usize = 7;
const WINDOW_SIGMA: f64 = 7.0 / 6.0;
const MIN_SIDE: usize = 8;

/// Fitted naturalness model: corpus feature mean and covariance
/// (row-major, [`NIQE_FEATURES`] squared entries).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NiqeModel {
    pub mu: Vec<f64>,
    pub cov: Vec<f64>,
}

struct GridEntry {
    alpha: f64,
    g1: f64,
    g2: f64,
    g3: f64,
}

/// Shape-parameter search grid 0.2..=10 in steps of 0.001 with the three
/// gamma-function values each candidate needs.
fn alpha_grid() -> &'static [GridEntry] {
    static GRID: OnceLock<Vec<GridEntry>> = OnceLock::new();
    GRID.get_or_init(|| {
        (0..=9800)
            .map(|i| {
                let alpha = 0.2 + i as f64 * 0.001;
                GridEntry {
                    alpha,
                    g1: gamma(1.0 / alpha),
                    g2: gamma(2.0 / alpha),
                    g3: gamma(3.0 / alpha),
                }
            })
            .collect()
    })
}

/// Moment-matched asymmetric generalized Gaussian fit returning
/// (shape α, left scale β_l, right scale β_r, mean offset η).
pub(crate) fn fit_aggd(samples: &[f64]) -> Result<(f64, f64, f64, f64)> {
    let n = samples.len() as f64;
    let sq_mean = samples.iter().map(|v| v * v).sum::<f64>() / n;
    if sq_mean < 1e-12 {
        return Err(UieError::Degenerate(
            "statistical fit on (near-)constant coefficients".into(),
        ));
    }
    let mut left_sq = 0.0;
    let mut left_n = 0usize;
    let mut right_sq = 0.0;
    let mut right_n = 0usize;
    let mut abs_sum = 0.0;
    for &v in samples {
        abs_sum += v.abs();
        if v < 0.0 {
            left_sq += v * v;
            left_n += 1;
        } else if v > 0.0 {
            right_sq += v * v;
            right_n += 1;
        }
    }
    if left_n == 0 || right_n == 0 {
        return Err(UieError::Degenerate(
            "statistical fit on a one-sided distribution".into(),
        ));
    }
    let sigma_l = (left_sq / left_n as f64).sqrt();
    let sigma_r = (right_sq / right_n as f64).sqrt();
    let gamma_hat = sigma_l / sigma_r;
    let r_hat = (abs_sum / n).powi(2) / sq_mean;
    let r_norm = r_hat * (gamma_hat.powi(3) + 1.0) * (gamma_hat + 1.0)
        / (gamma_hat * gamma_hat + 1.0).powi(2);
    let mut best = &alpha_grid()[0];
    let mut best_err = f64::INFINITY;
    for entry in alpha_grid() {
        let r = entry.g2 * entry.g2 / (entry.g1 * entry.g3);
        let err = (r - r_norm) * (r - r_norm);
        if err < best_err {
            best_err = err;
            best = entry;
        }
    }
    let scale = (best.g1 / best.g3).sqrt();
    let beta_l = sigma_l * scale;
    let beta_r = sigma_r * scale;
    let eta = (beta_r - beta_l) * best.g2 / best.g1;
    Ok((best.alpha, beta_l, beta_r, eta))
}

fn gaussian_window7() -> [f64; WINDOW * WINDOW] {
    let mut w = [0.0; WINDOW * WINDOW];
    let c = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..WINDOW {
        for x in 0..WINDOW {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            let v = (-d2 / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
            w[y * WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// 7×7 Gaussian filtering with clamp-to-edge padding.
fn filter(map: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let half = WINDOW as i64 / 2;
    let mut out = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for wy in 0..WINDOW as i64 {
                for wx in 0..WINDOW as i64 {
                    let sy = (y + wy - half).clamp(0, h as i64 - 1) as usize;
                    let sx = (x + wx - half).clamp(0, w as i64 - 1) as usize;
                    acc += win[(wy * WINDOW as i64 + wx) as usize] * map[sy * w + sx];
                }
            }
            out[(y as usize) * w + x as usize] = acc;
        }
    }
    out
}

/// Mean-subtracted contrast-normalized coefficients of the luminance.
fn mscn(img: &Image) -> Result<Vec<f64>> {
    let (h, w) = (img.height(), img.width());
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(UieError::Size(format!(
            "naturalness metric needs at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}"
        )));
    }
    let lum: Vec<f64> = img.luminance().iter().map(|&v| v as f64 * 255.0).collect();
    let win = gaussian_window7();
    let mu = filter(&lum, h, w, &win);
    let sq: Vec<f64> = lum.iter().map(|v| v * v).collect();
    let mu_sq = filter(&sq, h, w, &win);
    Ok(lum
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let sigma = (mu_sq[i] - mu[i] * mu[i]).abs().sqrt();
            (v - mu[i]) / (sigma + MSCN_C)
        })
        .collect())
}

/// 18-element statistical feature vector of one image.
pub(crate) fn niqe_features(img: &Image) -> Result<[f64; NIQE_FEATURES]> {
    let (h, w) = (img.height(), img.width());
    let coeffs = mscn(img)?;
    let mut feats = [0.0; NIQE_FEATURES];
    let (alpha, beta_l, beta_r, _) = fit_aggd(&coeffs)?;
    feats[0] = alpha;
    feats[1] = (beta_l + beta_r) / 2.0;

    let pair_products = |dy: i64, dx: i64| -> Vec<f64> {
        let mut out = Vec::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && ny < h as i64 && nx >= 0 && nx < w as i64 {
                    out.push(
                        coeffs[(y * w as i64 + x) as usize]
                            * coeffs[(ny * w as i64 + nx) as usize],
                    );
                }
            }
        }
        out
    };
    for (k, (dy, dx)) in [(0i64, 1i64), (1, 0), (1, 1), (1, -1)].iter().enumerate() {
        let (alpha, beta_l, beta_r, eta) = fit_aggd(&pair_products(*dy, *dx))?;
        let base = 2 + 4 * k;
        feats[base] = alpha;
        feats[base + 1] = eta;
        feats[base + 2] = beta_l;
        feats[base + 3] = beta_r;
    }
    Ok(feats)
}

/// Fit the naturalness model on a corpus of clean images; requires at
/// least [`NIQE_MIN_FIT`] images.
pub fn niqe_fit(corpus: &[Image]) -> Result<NiqeModel> {
    if corpus.len() < NIQE_MIN_FIT {
        return Err(UieError::Degenerate(format!(
            "naturalness fit needs at least {NIQE_MIN_FIT} images, got {}",
            corpus.len()
        )));
    }
    let feats: Vec<[f64; NIQE_FEATURES]> = corpus
        .iter()
        .map(niqe_features)
        .collect::<Result<Vec<_>>>()?;
    let n = feats.len() as f64;
    let mut mu = vec![0.0; NIQE_FEATURES];
    for f in &feats {
        for (m, v) in mu.iter_mut().zip(f) {
            *m += v / n;
        }
    }
    let mut cov = vec![0.0; NIQE_FEATURES * NIQE_FEATURES];
    for f in &feats {
        for i in 0..NIQE_FEATURES {
            for j in 0..NIQE_FEATURES {
                cov[i * NIQE_FEATURES + j] += (f[i] - mu[i]) * (f[j] - mu[j]) / n;
            }
        }
    }
    Ok(NiqeModel { mu, cov })
}

/// In-place lower-Cholesky factorization of a symmetric matrix.
fn cholesky(m: &mut [f64], n: usize) -> Result<()> {
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[i * n + j];
            for k in 0..j {
                s -= m[i * n + k] * m[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(UieError::Degenerate(
                        "covariance is not positive definite".into(),
                    ));
                }
                m[i * n + i] = s.sqrt();
            } else {
                m[i * n + j] = s / m[j * n + j];
            }
        }
    }
    Ok(())
}

/// √(dᵀ (Σ + ridge·I)⁻¹ d) with d = f − mu, via Cholesky solves.
pub(crate) fn mahalanobis(mu: &[f64], cov: &[f64], f: &[f64], ridge: f64) -> Result<f64> {
    let n = mu.len();
    if f.len() != n || cov.len() != n * n {
        return Err(UieError::Shape("mahalanobis dimension mismatch".into()));
    }
    let mut m = cov.to_vec();
    for i in 0..n {
        m[i * n + i] += ridge;
    }
    cholesky(&mut m, n)?;
    let d: Vec<f64> = f.iter().zip(mu).map(|(a, b)| a - b).collect();
    // forward solve L y = d
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = d[i];
        for k in 0..i {
            s -= m[i * n + k] * y[k];
        }
        y[i] = s / m[i * n + i];
    }
    // back solve L^T z = y
    let mut z = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= m[k * n + i] * z[k];
        }
        z[i] = s / m[i * n + i];
    }
    let q: f64 = d.iter().zip(&z).map(|(a, b)| a * b).sum();
    Ok(q.max(0.0).sqrt())
}

/// Distance of one image from the fitted model; lower is more natural.
/// Constant images have no coefficient statistics and are rejected.
pub fn niqe_score(model: &NiqeModel, img: &Image) -> Result<f64> {
    if model.mu.len() != NIQE_FEATURES || model.cov.len() != NIQE_FEATURES * NIQE_FEATURES {
        return Err(UieError::Shape("malformed naturalness model".into()));
    }
    let f = niqe_features(img)?;
    mahalanobis(&model.mu, &model.cov, &f, COV_RIDGE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Smooth textured image: sum of random sinusoids plus mild noise.
    fn textured(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fy, fx) = (rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0));
        let (py, px) = (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28));
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let base = 0.5
                    + 0.2
                        * ((y as f64 / h as f64 * fy * 6.28 + py).sin()
                            * (x as f64 / w as f64 * fx * 6.28 + px).cos());
                for _ in 0..3 {
                    let v = base + rng.gen_range(-0.05..0.05);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn gaussian_samples_fit_near_alpha_two() {
        use rand::distributions::Distribution;
        use statrs::distribution::Normal;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 0.7).unwrap();
        let samples: Vec<f64> = (0..40_000).map(|_| normal.sample(&mut rng)).collect();
        let (alpha, beta_l, beta_r, eta) = fit_aggd(&samples).unwrap();
        assert!((alpha - 2.0).abs() < 0.15, "alpha {alpha}");
        // for a symmetric Gaussian the two scales agree and the offset vanishes
        assert!((beta_l - beta_r).abs() < 0.05);
        assert!(eta.abs() < 0.05);
        // closed form: beta = sigma * sqrt(gamma(1/2)/gamma(3/2)) = sigma * sqrt(2)
        assert!((beta_l - 0.7 * 2.0f64.sqrt()).abs() < 0.05, "beta {beta_l}");
    }

    #[test]
    fn laplace_samples_fit_near_alpha_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples: Vec<f64> = (0..40_000)
            .map(|_| {
                let u: f64 = rng.gen_range(-0.5..0.5);
                -u.signum() * (1.0 - 2.0 * u.abs()).ln()
            })
            .collect();
        let (alpha, ..) = fit_aggd(&samples).unwrap();
        assert!((alpha - 1.0).abs() < 0.12, "alpha {alpha}");
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(matches!(
            fit_aggd(&[0.0; 100]),
            Err(UieError::Degenerate(_))
        ));
        assert!(matches!(
            fit_aggd(&[1.0; 100]),
            Err(UieError::Degenerate(_))
        ));
        let corpus: Vec<Image> = (0..12).map(|i| textured(i, 32, 32)).collect();
        let model = niqe_fit(&corpus).unwrap();
        let flat = Image::constant(32, 32, 0.5).unwrap();
        assert!(matches!(
            niqe_score(&model, &flat),
            Err(UieError::Degenerate(_))
        ));
    }

    #[test]
    fn fit_requires_minimum_corpus() {
        let corpus: Vec<Image> = (0..5).map(|i| textured(i, 16, 16)).collect();
        assert!(matches!(niqe_fit(&corpus), Err(UieError::Degenerate(_))));
    }

    /// Hand-solved 3×3 system checks the Cholesky distance end to end.
    #[test]
    fn mahalanobis_matches_explicit_inverse() {
        // SPD matrix with known inverse structure
        let cov = vec![4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let mu = vec![1.0, -2.0, 0.5];
        let f = vec![2.0, 0.0, -1.0];
        let got = mahalanobis(&mu, &cov, &f, 0.0).unwrap();
        // invert by Gaussian elimination, independently
        let n = 3;
        let mut aug = vec![0.0; n * 2 * n];
        for i in 0..n {
            for j in 0..n {
                aug[i * 2 * n + j] = cov[i * n + j];
            }
            aug[i * 2 * n + n + i] = 1.0;
        }
        for col in 0..n {
            let pivot = aug[col * 2 * n + col];
            for j in 0..2 * n {
                aug[col * 2 * n + j] /= pivot;
            }
            for row in 0..n {
                if row != col {
                    let factor = aug[row * 2 * n + col];
                    for j in 0..2 * n {
                        aug[row * 2 * n + j] -= factor * aug[col * 2 * n + j];
                    }
                }
            }
        }
        let d: Vec<f64> = f.iter().zip(&mu).map(|(a, b)| a - b).collect();
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                q += d[i] * aug[i * 2 * n + n + j] * d[j];
            }
        }
        assert!((got - q.sqrt()).abs() < 1e-9, "{got} vs {}", q.sqrt());
    }

    #[test]
    fn corrupted_images_score_farther_than_clean_ones() {
        let corpus: Vec<Image> = (0..14).map(|i| textured(i, 48, 48)).collect();
        let model = niqe_fit(&corpus).unwrap();
        // held-out clean images from the same family
        let clean: f64 = (100..103)
            .map(|i| niqe_score(&model, &textured(i, 48, 48)).unwrap())
            .sum::<f64>()
            / 3.0;
        // posterize a held-out image to two levels: grossly unnatural
        let src = textured(200, 48, 48);
        let posterized = Image::new(
            48,
            48,
            src.pixels()
                .iter()
                .map(|&v| if v > 0.5 { 0.9 } else { 0.1 })
                .collect(),
        )
        .unwrap();
        let bad = niqe_score(&model, &posterized).unwrap();
        assert!(
            bad > clean,
            "posterized {bad} should exceed clean {clean}"
        );
        assert!(clean.is_finite() && clean >= 0.0);
    }

    #[test]
    fn model_roundtrips_through_json() {
        let corpus: Vec<Image> = (0..12).map(|i| textured(i, 24, 24)).collect();
        let model = niqe_fit(&corpus).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let back: NiqeModel = serde_json::from_str(&json).unwrap();
        let img = textured(50, 24, 24);
        assert_eq!(
            niqe_score(&model, &img).unwrap(),
            niqe_score(&back, &img).unwrap()
        );
    }
}
