//! Domain-shift diagnostics on synthetic corruptions: pixel-space
//! discrepancy between aligned pseudo-clean and real sets, and feature
//! distribution shift between two ensembles under a pluggable
//! extractor.

use crate::error::{Result, UieError};
use crate::extractor::FeatureExtractor;
use crate::image::Image;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Airlight color blended in by the haze corruption.
const HAZE_COLOR: [f32; 3] = [0.8, 0.85, 0.9];

/// A synthetic corruption family with its parameters.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum NoiseKind {
    /// Additive zero-mean Gaussian noise, per component.
    Gaussian { sigma: f64 },
    /// Constant per-channel offset (wavelength-dependent tint).
    ColorCast { cast: [f64; 3] },
    /// Blend toward a fixed airlight color by `weight`.
    HazeBlend { weight: f64 },
}

/// A corruption plus the seed that makes it reproducible.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            NoiseKind::Gaussian { sigma } => {
                if !sigma.is_finite() || *sigma < 0.0 {
                    return Err(UieError::Range(format!("noise sigma {sigma} must be >= 0")));
                }
            }
            NoiseKind::ColorCast { cast } => {
                if cast.iter().any(|c| !c.is_finite() || c.abs() > 1.0) {
                    return Err(UieError::Range(format!(
                        "color cast {cast:?} must stay within [-1,1] per channel"
                    )));
                }
            }
            NoiseKind::HazeBlend { weight } => {
                if !(0.0..=1.0).contains(weight) {
                    return Err(UieError::Range(format!(
                        "haze weight {weight} must lie in [0,1]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Apply a corruption; outputs are clamped back to [0,1].
pub fn corrupt(img: &Image, spec: &NoiseSpec) -> Result<Image> {
    spec.validate()?;
    let pixels: Vec<f32> = match &spec.kind {
        NoiseKind::Gaussian { sigma } => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            img.pixels()
                .iter()
                .map(|&v| {
                    // Box–Muller from two uniform draws
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                    (v as f64 + sigma * z).clamp(0.0, 1.0) as f32
                })
                .collect()
        }
        NoiseKind::ColorCast { cast } => img
            .pixels()
            .chunks_exact(3)
            .flat_map(|px| {
                [
                    ((px[0] as f64 + cast[0]).clamp(0.0, 1.0)) as f32,
                    ((px[1] as f64 + cast[1]).clamp(0.0, 1.0)) as f32,
                    ((px[2] as f64 + cast[2]).clamp(0.0, 1.0)) as f32,
                ]
            })
            .collect(),
        NoiseKind::HazeBlend { weight } => img
            .pixels()
            .chunks_exact(3)
            .flat_map(|px| {
                [0, 1, 2].map(|c| {
                    ((1.0 - weight) * px[c] as f64 + weight * HAZE_COLOR[c] as f64)
                        .clamp(0.0, 1.0) as f32
                })
            })
            .collect(),
    };
    Image::new(img.height(), img.width(), pixels)
}

/// Mean over aligned pairs of the per-pixel mean squared difference
/// (each pair's squared L2 distance divided by its 3·H·W components).
pub fn domain_discrepancy(pseudo: &[Image], real: &[Image]) -> Result<f64> {
    domain_discrepancy_opts(pseudo, real, false)
}

/// As [`domain_discrepancy`], with `raw_sum` switching off the 3·H·W
/// normalization so each pair contributes its full squared distance.
pub fn domain_discrepancy_opts(pseudo: &[Image], real: &[Image], raw_sum: bool) -> Result<f64> {
    if pseudo.len() != real.len() || pseudo.is_empty() {
        return Err(UieError::Alignment(format!(
            "discrepancy needs equal nonempty lists, got {} vs {}",
            pseudo.len(),
            real.len()
        )));
    }
    let per_pair: Vec<f64> = pseudo
        .par_iter()
        .zip(real.par_iter())
        .enumerate()
        .map(|(i, (p, r))| {
            if !p.same_shape(r) {
                return Err(UieError::Alignment(format!(
                    "pair {i} shapes differ: {}x{} vs {}x{}",
                    p.height(),
                    p.width(),
                    r.height(),
                    r.width()
                )));
            }
            let sq: f64 = p
                .pixels()
                .iter()
                .zip(r.pixels())
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum();
            Ok(if raw_sum {
                sq
            } else {
                sq / p.pixels().len() as f64
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_pair.iter().sum::<f64>() / per_pair.len() as f64)
}

/// Artifact of a feature-shift analysis between two image ensembles.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ShiftReport {
    /// Pixel-space discrepancy; present only when the two sets are
    /// aligned pair by pair.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_domain: Option<f64>,
    /// Squared distance between the two mean feature vectors.
    pub delta_feat: f64,
    pub mu_r: Vec<f64>,
    pub mu_n: Vec<f64>,
    /// Tag of the extractor that produced the features.
    pub extractor: String,
}

impl ShiftReport {
    /// Whether `delta_feat` matches the stored means within `tol`.
    pub fn consistent(&self, tol: f64) -> bool {
        let recomputed: f64 = self
            .mu_r
            .iter()
            .zip(&self.mu_n)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (recomputed - self.delta_feat).abs() <= tol
    }
}

fn mean_features(
    set: &[Image],
    extractor: &(impl FeatureExtractor + ?Sized),
) -> Result<Vec<f64>> {
    let feats: Vec<Vec<f64>> = set
        .par_iter()
        .map(|img| extractor.features(img))
        .collect::<Result<Vec<_>>>()?;
    let dim = feats[0].len();
    if feats.iter().any(|f| f.len() != dim) {
        return Err(UieError::Extractor(
            "feature dimension varies across the set".into(),
        ));
    }
    let mut mu = vec![0.0; dim];
    for f in &feats {
        for (m, v) in mu.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= feats.len() as f64;
    }
    Ok(mu)
}

/// Mean extractor features of each set and the squared distance between
/// them. When the sets are aligned (equal length, matching shapes) the
/// report also carries the pixel-space discrepancy.
pub fn feature_shift(
    set_r: &[Image],
    set_n: &[Image],
    extractor: &(impl FeatureExtractor + ?Sized),
) -> Result<ShiftReport> {
    if set_r.is_empty() || set_n.is_empty() {
        return Err(UieError::Alignment(
            "feature shift needs two nonempty sets".into(),
        ));
    }
    let mu_r = mean_features(set_r, extractor)?;
    let mu_n = mean_features(set_n, extractor)?;
    if mu_r.len() != mu_n.len() {
        return Err(UieError::Extractor(format!(
            "feature dimensions differ between sets: {} vs {}",
            mu_r.len(),
            mu_n.len()
        )));
    }
    let delta_feat: f64 = mu_r
        .iter()
        .zip(&mu_n)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let delta_domain = domain_discrepancy(set_r, set_n).ok();
    Ok(ShiftReport {
        delta_domain,
        delta_feat,
        mu_r,
        mu_n,
        extractor: extractor.tag().to_string(),
    })
}
