//! Reliable-metric selection: build clean→degraded mixture series,
//! check that candidate no-reference metrics fall monotonically along
//! them, and rank candidates by monotonicity rate then correlation.

use crate::error::{Result, UieError};
use crate::image::{linear_mix, Image};
use rayon::prelude::*;

/// Interpolation grid used when the caller does not supply one.
pub const DEFAULT_RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Relative tie tolerance (fraction of the per-series score range)
/// applied when no absolute tolerance is given.
pub const DEFAULT_REL_TOLERANCE: f64 = 1e-6;

/// A clean image, a degraded counterpart, and the blend path between
/// them at strictly increasing ratios from 0 (clean) to 1 (degraded).
#[derive(Clone, Debug)]
pub struct MixtureSeries {
    pub clean: Image,
    pub degraded: Image,
    pub ratios: Vec<f64>,
    pub mixed: Vec<Image>,
}

fn validate_ratios(ratios: &[f64]) -> Result<()> {
    if ratios.len() < 2 {
        return Err(UieError::Grid(format!(
            "ratio grid needs at least 2 points, got {}",
            ratios.len()
        )));
    }
    if ratios[0] != 0.0 || *ratios.last().unwrap() != 1.0 {
        return Err(UieError::Grid(format!(
            "ratio grid must run from 0 to 1, got {:?}",
            ratios
        )));
    }
    for pair in ratios.windows(2) {
        if !(pair[0] < pair[1]) {
            return Err(UieError::Grid(format!(
                "ratio grid must be strictly increasing, got {:?}",
                ratios
            )));
        }
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(UieError::Grid(format!(
            "ratio grid must stay in [0,1], got {:?}",
            ratios
        )));
    }
    Ok(())
}

/// Blend `clean` toward `degraded` at each ratio. The endpoint blends
/// reproduce the originals bit for bit.
pub fn make_mixture_series(clean: &Image, degraded: &Image, ratios: &[f64]) -> Result<MixtureSeries> {
    validate_ratios(ratios)?;
    let mixed = ratios
        .iter()
        .map(|&t| linear_mix(clean, degraded, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(MixtureSeries {
        clean: clean.clone(),
        degraded: degraded.clone(),
        ratios: ratios.to_vec(),
        mixed,
    })
}

/// Whether scores fall (strictly, up to `tol`) along one series.
fn series_passes(scores: &[f64], tol: Option<f64>) -> bool {
    let tol = tol.unwrap_or_else(|| {
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        DEFAULT_REL_TOLERANCE * (hi - lo)
    });
    scores.windows(2).all(|w| w[1] - w[0] <= tol)
}

/// Fraction of (clean, degraded) pairs whose metric scores decrease
/// monotonically along the mixture series, allowing ties within
/// `tolerance` (when `None`, [`DEFAULT_REL_TOLERANCE`] of each series'
/// observed score range). A metric failure aborts with the pair index.
pub fn monotonicity_rate<F>(
    metric: F,
    pairs: &[(Image, Image)],
    ratios: &[f64],
    tolerance: Option<f64>,
) -> Result<f64>
where
    F: Fn(&Image) -> Result<f64> + Sync,
{
    if pairs.is_empty() {
        return Err(UieError::Degenerate(
            "monotonicity rate over zero pairs".into(),
        ));
    }
    validate_ratios(ratios)?;
    let passes: Vec<bool> = pairs
        .par_iter()
        .enumerate()
        .map(|(idx, (clean, degraded))| {
            let wrap = |e: UieError| UieError::MetricFailure {
                pair: idx,
                source: Box::new(e),
            };
            let series = make_mixture_series(clean, degraded, ratios).map_err(wrap)?;
            let scores = series
                .mixed
                .iter()
                .map(|img| metric(img).map_err(wrap))
                .collect::<Result<Vec<_>>>()?;
            Ok(series_passes(&scores, tolerance))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(passes.iter().filter(|&&p| p).count() as f64 / pairs.len() as f64)
}

/// One ranked row of the selection table.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct MetricReport {
    pub tag: String,
    pub monotonicity: f64,
    pub plcc: f64,
    /// 1-based position under the ordering rule.
    pub rank: usize,
}

/// Order candidates by monotonicity rate (descending), breaking ties by
/// correlation (descending); fully tied entries keep their input order.
pub fn rank_metrics(entries: &[(String, f64, f64)]) -> Result<Vec<MetricReport>> {
    if entries.is_empty() {
        return Err(UieError::Degenerate("ranking zero metrics".into()));
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        let (ka, kb) = (&entries[a], &entries[b]);
        kb.1.partial_cmp(&ka.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(kb.2.partial_cmp(&ka.2).unwrap_or(std::cmp::Ordering::Equal))
    });
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(rank, idx)| MetricReport {
            tag: entries[idx].0.clone(),
            monotonicity: entries[idx].1,
            plcc: entries[idx].2,
            rank: rank + 1,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn mse(a: &Image, b: &Image) -> f64 {
        a.pixels()
            .iter()
            .zip(b.pixels())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            / a.pixels().len() as f64
    }

    #[test]
    fn series_construction_and_endpoints() {
        let clean = rand_image(6, 6, 1);
        let degraded = rand_image(6, 6, 2);
        let s = make_mixture_series(&clean, &degraded, &DEFAULT_RATIOS).unwrap();
        assert_eq!(s.mixed.len(), 5);
        assert_eq!(s.mixed[0], clean, "t=0 must reproduce the clean image");
        assert_eq!(s.mixed[4], degraded, "t=1 must reproduce the degraded image");
        let two = make_mixture_series(&clean, &degraded, &[0.0, 1.0]).unwrap();
        assert_eq!(two.mixed.len(), 2);
        // mid ratio is plain per-pixel arithmetic
        let mid = &s.mixed[2];
        for (i, &v) in mid.pixels().iter().enumerate() {
            let want = (0.5 * clean.pixels()[i] as f64 + 0.5 * degraded.pixels()[i] as f64) as f32;
            assert_eq!(v, want);
        }
    }

    #[test]
    fn bad_grids_are_rejected() {
        let a = rand_image(4, 4, 3);
        let b = rand_image(4, 4, 4);
        for grid in [
            &[0.0, 0.5][..],
            &[0.25, 1.0],
            &[0.0, 0.5, 0.5, 1.0],
            &[0.0, 0.7, 0.4, 1.0],
            &[0.0],
        ] {
            assert!(
                matches!(make_mixture_series(&a, &b, grid), Err(UieError::Grid(_))),
                "grid {grid:?} should be rejected"
            );
        }
    }

    #[test]
    fn signed_mse_oracle_rates() {
        let pairs: Vec<(Image, Image)> = (0..6)
            .map(|i| (rand_image(8, 8, 10 + i), rand_image(8, 8, 50 + i)))
            .collect();
        // score = −MSE to the clean endpoint: strictly decreasing in t
        for (idx, (clean, _)) in pairs.iter().enumerate() {
            let c = clean.clone();
            let neg = move |img: &Image| Ok(-mse(img, &c));
            let rate =
                monotonicity_rate(neg, &pairs[idx..idx + 1], &DEFAULT_RATIOS, None).unwrap();
            assert_eq!(rate, 1.0);
        }
        // a single shared clean reference still works across all pairs
        let anchor = pairs[0].0.clone();
        let neg = |img: &Image| Ok(-mse(img, &anchor));
        assert_eq!(
            monotonicity_rate(neg, &pairs[..1], &DEFAULT_RATIOS, None).unwrap(),
            1.0
        );
        let pos = |img: &Image| Ok(mse(img, &anchor));
        assert_eq!(
            monotonicity_rate(pos, &pairs[..1], &DEFAULT_RATIOS, None).unwrap(),
            0.0
        );
    }

    #[test]
    fn rate_counts_passing_fraction() {
        let clean = rand_image(8, 8, 70);
        let degraded = rand_image(8, 8, 71);
        let pairs = vec![
            (clean.clone(), degraded.clone()),
            (degraded.clone(), clean.clone()),
        ];
        // decreasing for the first pair, increasing for the second
        let metric = move |img: &Image| Ok(-mse(img, &clean));
        let rate = monotonicity_rate(metric, &pairs, &DEFAULT_RATIOS, None).unwrap();
        assert_eq!(rate, 0.5);
    }

    #[test]
    fn rate_is_invariant_under_monotone_transforms() {
        let pairs: Vec<(Image, Image)> = (0..5)
            .map(|i| (rand_image(8, 8, 100 + i), rand_image(8, 8, 200 + i)))
            .collect();
        let anchors: Vec<Image> = pairs.iter().map(|(c, _)| c.clone()).collect();
        // a deliberately imperfect metric: distance to the *first* clean
        // image, so some series pass and some may not
        let base = {
            let a = anchors[0].clone();
            move |img: &Image| Ok(-mse(img, &a))
        };
        let rate = monotonicity_rate(&base, &pairs, &DEFAULT_RATIOS, None).unwrap();
        let exp_metric = {
            let a = anchors[0].clone();
            move |img: &Image| Ok((-mse(img, &a)).exp())
        };
        let affine = {
            let a = anchors[0].clone();
            move |img: &Image| Ok(2.0 * -mse(img, &a) + 3.0)
        };
        assert_eq!(
            monotonicity_rate(exp_metric, &pairs, &DEFAULT_RATIOS, None).unwrap(),
            rate
        );
        assert_eq!(
            monotonicity_rate(affine, &pairs, &DEFAULT_RATIOS, None).unwrap(),
            rate
        );
    }

    #[test]
    fn endpoint_scores_match_direct_evaluation() {
        let clean = rand_image(8, 8, 300);
        let degraded = rand_image(8, 8, 301);
        let series = make_mixture_series(&clean, &degraded, &DEFAULT_RATIOS).unwrap();
        let anchor = rand_image(8, 8, 302);
        let metric = |img: &Image| -mse(img, &anchor);
        assert_eq!(metric(&series.mixed[0]), metric(&clean));
        assert_eq!(metric(&series.mixed[4]), metric(&degraded));
    }

    #[test]
    fn metric_failures_carry_the_pair_index() {
        let pairs: Vec<(Image, Image)> = (0..3)
            .map(|i| (rand_image(8, 8, 400 + i), rand_image(8, 8, 500 + i)))
            .collect();
        let poisoned = pairs[2].0.clone();
        let metric = move |img: &Image| {
            if img == &poisoned {
                Err(UieError::Degenerate("poisoned".into()))
            } else {
                Ok(0.0)
            }
        };
        let err = monotonicity_rate(metric, &pairs, &DEFAULT_RATIOS, None).unwrap_err();
        match err {
            UieError::MetricFailure { pair, .. } => assert_eq!(pair, 2),
            other => panic!("wrong error variant: {other}"),
        }
    }

    #[test]
    fn tie_tolerance_accepts_flat_plateaus() {
        let clean = rand_image(8, 8, 600);
        let degraded = rand_image(8, 8, 601);
        let pairs = vec![(clean, degraded)];
        // a constant metric has zero range, so the relative default
        // tolerance admits its all-tied series
        let flat = |_: &Image| Ok(42.0);
        assert_eq!(
            monotonicity_rate(flat, &pairs, &DEFAULT_RATIOS, None).unwrap(),
            1.0
        );
        // with a strict absolute tolerance of zero it still passes
        // (ties are non-increases)
        let flat = |_: &Image| Ok(42.0);
        assert_eq!(
            monotonicity_rate(flat, &pairs, &DEFAULT_RATIOS, Some(0.0)).unwrap(),
            1.0
        );
    }

    #[test]
    fn ranking_orders_and_breaks_ties() {
        let single = rank_metrics(&[("only".into(), 0.5, 0.1)]).unwrap();
        assert_eq!(single[0].rank, 1);

        let ranked = rank_metrics(&[
            ("b".into(), 0.9, 0.9),
            ("a".into(), 1.0, 0.5),
        ])
        .unwrap();
        assert_eq!(ranked[0].tag, "a", "higher monotonicity dominates");
        assert_eq!(ranked[1].tag, "b");
        assert_eq!((ranked[0].rank, ranked[1].rank), (1, 2));

        let ranked = rank_metrics(&[
            ("low".into(), 0.8, 0.6),
            ("high".into(), 0.8, 0.8),
        ])
        .unwrap();
        assert_eq!(ranked[0].tag, "high", "plcc breaks monotonicity ties");

        // full ties keep input order (stable)
        let ranked = rank_metrics(&[
            ("first".into(), 0.7, 0.7),
            ("second".into(), 0.7, 0.7),
        ])
        .unwrap();
        assert_eq!(ranked[0].tag, "first");
        assert_eq!(ranked[1].tag, "second");

        assert!(matches!(rank_metrics(&[]), Err(UieError::Degenerate(_))));
    }

    /// The differentiable scorer over blur degradations: score the
    /// series once, decide each pair by hand from the table, and compare
    /// against the reported rate.
    #[test]
    fn proxy_rate_matches_precomputed_table() {
        use crate::iqa::{ProxyScorer, QualityScorer};
        let mut pairs = Vec::new();
        for i in 0..8 {
            let clean = rand_image(16, 16, 700 + i);
            // degrade by heavy box blur: average over a 5x5 neighborhood
            let (h, w) = (16usize, 16usize);
            let mut blurred = vec![0.0f32; h * w * 3];
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    for c in 0..3 {
                        let mut acc = 0.0f64;
                        for dy in -2..=2i64 {
                            for dx in -2..=2i64 {
                                let yy = (y + dy).clamp(0, h as i64 - 1) as usize;
                                let xx = (x + dx).clamp(0, w as i64 - 1) as usize;
                                acc += clean.pixels()[(yy * w + xx) * 3 + c] as f64;
                            }
                        }
                        blurred[(y as usize * w + x as usize) * 3 + c] = (acc / 25.0) as f32;
                    }
                }
            }
            pairs.push((clean, Image::new(h, w, blurred).unwrap()));
        }
        let scorer = ProxyScorer::new();
        let via_api = monotonicity_rate(
            |img| scorer.score(img),
            &pairs,
            &DEFAULT_RATIOS,
            None,
        )
        .unwrap();
        // independent pass/fail decision from a score table
        let mut passing = 0;
        for (clean, degraded) in &pairs {
            let series = make_mixture_series(clean, degraded, &DEFAULT_RATIOS).unwrap();
            let table: Vec<f64> = series
                .mixed
                .iter()
                .map(|img| scorer.score(img).unwrap())
                .collect();
            let range = table.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - table.iter().cloned().fold(f64::INFINITY, f64::min);
            let tol = 1e-6 * range;
            let mut ok = true;
            for i in 0..table.len() - 1 {
                if table[i + 1] - table[i] > tol {
                    ok = false;
                }
            }
            if ok {
                passing += 1;
            }
        }
        assert_eq!(via_api, passing as f64 / pairs.len() as f64);
        // blurring strictly removes contrast and sharpness, so the
        // scorer should fall along every series here
        assert_eq!(via_api, 1.0);
    }
}
