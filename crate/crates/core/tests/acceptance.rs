//! Acceptance gate: one integration test per shipped acceptance
//! criterion. Every test prints exactly one
//! `criterion NN: PASS|FAIL — <label>` line (visible with
//! `cargo test --test acceptance -- --nocapture`; captured output is
//! replayed automatically for failures) and panics with detail when
//! the criterion does not hold.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uie_core::config::{load_finetune_config, load_pretrain_config};
use uie_core::domain::{domain_discrepancy, feature_shift};
use uie_core::extractor::{ConvPyramidExtractor, IdentityExtractor};
use uie_core::graph::{finite_diff, GraphBuilder, NodeId};
use uie_core::image::{Image, ImagePair};
use uie_core::iqa::{plcc, psnr, ssim, uciqe_components, uiqm_components, ProxyScorer, QualityScorer};
use uie_core::loss::{
    build_pearson_loss, build_pixel_loss, build_perceptual_loss, build_total_loss, pearson_corr,
    pearson_loss, pixel_loss, LossWeights,
};
use uie_core::manifest::SourceTag;
use uie_core::net::{
    build_network, forward_enhance, init_network, pixel_shuffle, pixel_unshuffle, FeatureMap,
    NetworkConfig,
};
use uie_core::select::monotonicity_rate;
use uie_core::tensor::Tensor;
use uie_core::train::{
    finetune, finetune_span, generate_pseudo_labels, pretrain, FinetuneConfig, PretrainConfig,
    ScheduleStage,
};
use uie_core::params::Checkpoint;

/// Print the verdict line, then panic with detail if the criterion
/// failed.
fn verdict(n: usize, label: &str, outcome: Result<(), String>) {
    match &outcome {
        Ok(()) => println!("criterion {n:02}: PASS — {label}"),
        Err(_) => println!("criterion {n:02}: FAIL — {label}"),
    }
    if let Err(why) = outcome {
        panic!("criterion {n:02} ({label}): {why}");
    }
}

macro_rules! check {
    ($cond:expr, $($msg:tt)*) => {
        if !($cond) {
            return Err(format!($($msg)*));
        }
    };
}

fn check_budget(t0: Instant, budget: Duration, what: &str) -> Result<(), String> {
    let took = t0.elapsed();
    if took <= budget {
        Ok(())
    } else {
        Err(format!("{what} took {took:.1?}, budget {budget:.1?}"))
    }
}

fn rand_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn rand_image_in(h: usize, w: usize, seed: u64, lo: f32, hi: f32) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..h * w * 3).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Smooth, colorful synthetic "clean" image: per-channel sinusoid
/// gratings with seeded phases and frequencies.
fn toy_clean(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = vec![0.0f32; h * w * 3];
    for c in 0..3 {
        let fy = rng.gen_range(0.5..2.0);
        let fx = rng.gen_range(0.5..2.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for y in 0..h {
            for x in 0..w {
                let v = 0.5
                    + 0.4
                        * (std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64)
                            + phase)
                            .sin();
                px[(y * w + x) * 3 + c] = v as f32;
            }
        }
    }
    Image::new(h, w, px).unwrap()
}

/// The toy degradation the pretraining stage must learn to invert:
/// a fixed per-channel dimming (underwater-like attenuation).
fn toy_degrade(clean: &Image) -> Image {
    const GAIN: [f32; 3] = [0.55, 0.75, 0.7];
    let px = clean
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * GAIN[i % 3])
        .collect();
    Image::new(clean.height(), clean.width(), px).unwrap()
}

fn toy_pairs(n: usize, size: usize, seed0: u64) -> Vec<ImagePair> {
    (0..n)
        .map(|i| {
            let clean = toy_clean(size, size, seed0 + i as u64);
            ImagePair::new(toy_degrade(&clean), clean).unwrap()
        })
        .collect()
}

/// A quick pretrained starting point shared by the fine-tuning
/// criteria: tiny network fitted to the toy degradation.
fn quick_pretrain(epochs: usize, seed: u64) -> (NetworkConfig, Checkpoint) {
    let net = NetworkConfig::tiny();
    let cfg = PretrainConfig {
        epochs,
        lr: 1e-3,
        schedule: vec![ScheduleStage { start_epoch: 0, batch_size: 4, patch_size: 16 }],
        seed,
        ..PretrainConfig::default()
    };
    let out = pretrain(&toy_pairs(8, 16, 500), &net, &cfg).expect("toy pretraining failed");
    (net, out.checkpoint)
}

// ---------------------------------------------------------------------------
// 1. Loss-oracle equivalence
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_loss_oracle_equivalence() {
    let t0 = Instant::now();
    let run = || -> Result<(), String> {
        for trial in 0..100u64 {
            let a = rand_image(8, 8, 10_000 + trial);
            let b = rand_image(8, 8, 20_000 + trial);

            // two-pass correlation oracle: means first, then moments
            let n = (8 * 8 * 3) as f64;
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..a.pixels().len() {
                ma += a.pixels()[i] as f64;
                mb += b.pixels()[i] as f64;
            }
            ma /= n;
            mb /= n;
            let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
            for i in 0..a.pixels().len() {
                let dx = a.pixels()[i] as f64 - ma;
                let dy = b.pixels()[i] as f64 - mb;
                cov += dx * dy;
                va += dx * dx;
                vb += dy * dy;
            }
            let rho_oracle = cov / (va.sqrt() * vb.sqrt());
            let rho = pearson_corr(&a, &b).map_err(|e| e.to_string())?;
            check!(
                (rho - rho_oracle).abs() <= 1e-6,
                "trial {trial}: corr {rho} vs oracle {rho_oracle}"
            );
            let l = pearson_loss(&a, &b).map_err(|e| e.to_string())?;
            check!(
                (l - (1.0 - rho_oracle) / 2.0).abs() <= 1e-6,
                "trial {trial}: corr loss {l} vs oracle"
            );

            // elementwise pixel-loss oracle, walked by coordinates
            let mut acc = 0.0f64;
            for y in 0..8 {
                for x in 0..8 {
                    for c in 0..3 {
                        acc += (a.get(y, x, c) as f64 - b.get(y, x, c) as f64).abs();
                    }
                }
            }
            let pix_oracle = acc / n;
            let pix = pixel_loss(&a, &b).map_err(|e| e.to_string())?;
            check!(
                (pix - pix_oracle).abs() <= 1e-7,
                "trial {trial}: pixel {pix} vs oracle {pix_oracle}"
            );
        }
        check_budget(t0, Duration::from_secs(5), "loss-oracle sweep")
    };
    verdict(1, "loss-oracle equivalence over 100 random pairs", run());
}

// ---------------------------------------------------------------------------
// 2. Gradient correctness
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_gradient_correctness() {
    let t0 = Instant::now();
    let run = || -> Result<(), String> {
        let pyramid = ConvPyramidExtractor::default();
        let proxy = ProxyScorer::new();
        let weights = LossWeights::default();
        // (name, needs_target, graph builder)
        type Build<'a> = Box<dyn Fn(&mut GraphBuilder, NodeId, Option<NodeId>) -> NodeId + 'a>;
        let losses: Vec<(&str, bool, Build)> = vec![
            ("pixel", true, Box::new(|gb, p, t| build_pixel_loss(gb, p, t.unwrap()))),
            ("pearson", true, Box::new(|gb, p, t| build_pearson_loss(gb, p, t.unwrap()))),
            (
                "perceptual",
                true,
                Box::new(|gb, p, t| build_perceptual_loss(gb, p, t.unwrap(), &pyramid)),
            ),
            (
                "proxy-score",
                false,
                Box::new(|gb, p, _| proxy.build_score(gb, p).unwrap()),
            ),
            (
                "total",
                true,
                Box::new(|gb, p, t| {
                    let q = proxy.build_score(gb, p);
                    build_total_loss(gb, p, t.unwrap(), q, 42.0, &weights, &pyramid)
                }),
            ),
        ];
        for (name, needs_target, build) in &losses {
            for trial in 0..20u64 {
                let mut gb = GraphBuilder::new();
                let pred = gb.feed(&[4, 4, 3]);
                let target = gb.feed(&[4, 4, 3]);
                let loss = build(&mut gb, pred, needs_target.then_some(target));
                let program = gb.finish();
                let mut feeds = BTreeMap::new();
                // separated ranges keep |pred − target| far from the
                // abs kink relative to the finite-difference step
                feeds.insert(pred, rand_image_in(4, 4, 31_000 + trial, 0.05, 0.45).to_tensor());
                feeds.insert(
                    target,
                    rand_image_in(4, 4, 32_000 + trial, 0.55, 0.95).to_tensor(),
                );
                let exec = program.forward(&feeds);
                let grads = program.backward(&exec, loss, &[pred]);
                let g = grads.get(&pred).expect("gradient for the prediction feed");
                for idx in 0..48 {
                    let numeric = finite_diff(&program, &feeds, loss, pred, idx, 1e-4);
                    let analytic = g.data()[idx];
                    let rel = (analytic - numeric).abs() / numeric.abs().max(1e-4);
                    check!(
                        rel < 1e-3,
                        "{name} trial {trial} idx {idx}: analytic {analytic} vs numeric {numeric} (rel {rel:.2e})"
                    );
                }
            }
        }
        check_budget(t0, Duration::from_secs(120), "gradient sweep")
    };
    verdict(2, "analytic gradients match central finite differences", run());
}

// ---------------------------------------------------------------------------
// 3. Pearson invariances
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_pearson_invariances() {
    let run = || -> Result<(), String> {
        let img = rand_image_in(8, 8, 777, 0.05, 0.55);
        let self_loss = pearson_loss(&img, &img).map_err(|e| e.to_string())?;
        check!(self_loss < 1e-7, "self loss {self_loss}");

        let mut rng = ChaCha8Rng::seed_from_u64(778);
        for k in 0..10 {
            let a: f32 = rng.gen_range(0.2..1.5);
            let b: f32 = rng.gen_range(0.02..0.15);
            let mapped = Image::new(
                8,
                8,
                img.pixels().iter().map(|&v| a * v + b).collect(),
            )
            .map_err(|e| e.to_string())?;
            let l = pearson_loss(&img, &mapped).map_err(|e| e.to_string())?;
            check!(l < 1e-6, "affine trial {k} (a={a}, b={b}): loss {l}");
        }

        let negated = Image::new(8, 8, img.pixels().iter().map(|&v| 1.0 - v).collect())
            .map_err(|e| e.to_string())?;
        let l = pearson_loss(&img, &negated).map_err(|e| e.to_string())?;
        check!((l - 1.0).abs() < 1e-6, "negation loss {l}");
        Ok(())
    };
    verdict(3, "correlation loss invariances (self, affine, negation)", run());
}

// ---------------------------------------------------------------------------
// 4. Frozen-scorer invariant
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_frozen_scorer() {
    let t0 = Instant::now();
    let run = || -> Result<(), String> {
        let (net, ckpt) = quick_pretrain(10, 40);
        let scorer = ProxyScorer::new();
        let inputs: Vec<(Image, SourceTag)> = (0..16)
            .map(|i| (toy_degrade(&toy_clean(16, 16, 600 + i)), SourceTag::NonReference))
            .collect();
        let records =
            generate_pseudo_labels(&inputs, &ckpt, &net, &scorer).map_err(|e| e.to_string())?;
        let digest_before = scorer.parameters().digest();
        let cfg = FinetuneConfig {
            steps: 50,
            batch_size: 2,
            lr: 1e-4,
            seed: 41,
            ..FinetuneConfig::default()
        };
        let out = finetune(&records, &ckpt, &scorer, &IdentityExtractor, &net, &cfg)
            .map_err(|e| e.to_string())?;
        check!(
            scorer.parameters().digest() == digest_before,
            "scorer parameters changed during fine-tuning"
        );

        let (mut changed, mut total) = (0usize, 0usize);
        for (name, before) in ckpt.params.iter() {
            if !before.trainable {
                continue;
            }
            let after = out
                .checkpoint
                .params
                .get(name)
                .ok_or_else(|| format!("parameter {name} vanished"))?;
            for (x, y) in before.value.data().iter().zip(after.data()) {
                total += 1;
                if x.to_bits() != y.to_bits() {
                    changed += 1;
                }
            }
        }
        let frac = changed as f64 / total as f64;
        check!(
            frac >= 0.99,
            "only {changed}/{total} = {frac:.4} of trainable entries changed"
        );
        check_budget(t0, Duration::from_secs(300), "frozen-scorer fine-tune")
    };
    verdict(4, "scorer frozen bitwise while >=99% of network weights move", run());
}

// ---------------------------------------------------------------------------
// 5. Objective term isolation
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_term_isolation() {
    let run = || -> Result<(), String> {
        let (net, ckpt) = quick_pretrain(6, 50);
        let scorer = ProxyScorer::new();
        let inputs: Vec<(Image, SourceTag)> = (0..6)
            .map(|i| (toy_degrade(&toy_clean(16, 16, 700 + i)), SourceTag::NonReference))
            .collect();
        let records =
            generate_pseudo_labels(&inputs, &ckpt, &net, &scorer).map_err(|e| e.to_string())?;

        let mut cfg = FinetuneConfig {
            steps: 10,
            batch_size: 2,
            lr: 1e-4,
            seed: 51,
            ..FinetuneConfig::default()
        };
        cfg.weights.lambda3 = 0.0;
        let out = finetune(&records, &ckpt, &scorer, &IdentityExtractor, &net, &cfg)
            .map_err(|e| e.to_string())?;
        for row in &out.log {
            check!(
                row.score == 0.0,
                "step {}: score term {} with lambda3 = 0",
                row.step,
                row.score
            );
        }

        cfg.weights.lambda2 = 0.0;
        let out = finetune(&records, &ckpt, &scorer, &IdentityExtractor, &net, &cfg)
            .map_err(|e| e.to_string())?;
        for row in &out.log {
            let want = cfg.weights.lambda1 * row.pixel;
            check!(
                (row.total - want).abs() <= 1e-6,
                "step {}: total {} vs lambda1*pixel {}",
                row.step,
                row.total,
                want
            );
        }
        Ok(())
    };
    verdict(5, "objective terms isolate under zeroed weights", run());
}

// ---------------------------------------------------------------------------
// 6. Transfer-learning effect
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_transfer_effect() {
    let t0 = Instant::now();
    let run = || -> Result<(), String> {
        let (net, ckpt) = quick_pretrain(60, 60);
        let scorer = ProxyScorer::new();
        let inputs: Vec<(Image, SourceTag)> = (0..32)
            .map(|i| (toy_degrade(&toy_clean(16, 16, 800 + i)), SourceTag::NonReference))
            .collect();
        let records =
            generate_pseudo_labels(&inputs, &ckpt, &net, &scorer).map_err(|e| e.to_string())?;
        // pretrain-only quality: the frozen reference scores of the
        // pseudo labels, which are exactly the pretrained outputs
        let q_before: f64 =
            records.iter().map(|r| r.q_reference).sum::<f64>() / records.len() as f64;

        let cfg = FinetuneConfig {
            steps: 40,
            batch_size: 32,
            lr: 2e-4,
            weights: LossWeights { lambda1: 1.0, lambda2: 0.25, lambda3: 0.5 },
            seed: 61,
            ..FinetuneConfig::default()
        };
        let out = finetune(&records, &ckpt, &scorer, &ConvPyramidExtractor::default(), &net, &cfg)
            .map_err(|e| e.to_string())?;
        check!(out.log.len() == 40, "expected the full 40 steps");

        let mut q_after_sum = 0.0;
        for (img, _) in &inputs {
            let enhanced =
                forward_enhance(img, &out.checkpoint.params, &net).map_err(|e| e.to_string())?;
            q_after_sum += scorer.score(&enhanced).map_err(|e| e.to_string())?;
        }
        let q_after = q_after_sum / inputs.len() as f64;
        check!(
            q_after > q_before,
            "mean quality did not improve: {q_after:.4} after vs {q_before:.4} before"
        );

        // trailing-window mean of the logged batch quality must be
        // non-decreasing across the last quarter of steps
        const WINDOW: usize = 10;
        let series: Vec<f64> = out.log.iter().map(|r| r.mean_q).collect();
        let trailing: Vec<f64> = (WINDOW..=series.len())
            .map(|end| series[end - WINDOW..end].iter().sum::<f64>() / WINDOW as f64)
            .collect();
        let quarter = trailing.len() - trailing.len() / 4;
        for i in quarter..trailing.len() - 1 {
            check!(
                trailing[i + 1] >= trailing[i] - 1e-9,
                "trailing mean dipped at {i}: {} -> {}",
                trailing[i],
                trailing[i + 1]
            );
        }
        check_budget(t0, Duration::from_secs(600), "transfer-effect run")
    };
    verdict(6, "fine-tuning raises mean quality with a steady tail", run());
}

// ---------------------------------------------------------------------------
// 7. Overfit sanity
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_overfit_sanity() {
    let t0 = Instant::now();
    let run = || -> Result<(), String> {
        let net = NetworkConfig::tiny();
        let pairs = toy_pairs(8, 16, 900);
        let mut cfg = PretrainConfig {
            epochs: 500,
            lr: 1e-3,
            schedule: vec![ScheduleStage { start_epoch: 0, batch_size: 4, patch_size: 16 }],
            seed: 70,
            ..PretrainConfig::default()
        };

        let trainset_psnr = |ckpt: &Checkpoint| -> Result<f64, String> {
            let mut acc = 0.0;
            for pair in &pairs {
                let pred =
                    forward_enhance(&pair.input, &ckpt.params, &net).map_err(|e| e.to_string())?;
                acc += psnr(&pred, &pair.target).map_err(|e| e.to_string())?;
            }
            Ok(acc / pairs.len() as f64)
        };

        let with_cor = pretrain(&pairs, &net, &cfg).map_err(|e| e.to_string())?;
        let psnr_with = trainset_psnr(&with_cor.checkpoint)?;
        check!(
            psnr_with >= 30.0,
            "trainset PSNR {psnr_with:.2} dB below 30 dB after 500 steps"
        );

        cfg.use_pearson = false;
        let without = pretrain(&pairs, &net, &cfg).map_err(|e| e.to_string())?;
        let psnr_without = trainset_psnr(&without.checkpoint)?;
        check!(
            psnr_with >= psnr_without - 1.0,
            "correlation term cost too much: {psnr_with:.2} dB vs {psnr_without:.2} dB pixel-only"
        );
        check_budget(t0, Duration::from_secs(600), "overfit runs")
    };
    verdict(7, "500-step overfit reaches 30 dB; correlation term is not harmful", run());
}

// ---------------------------------------------------------------------------
// 8. Metric-selection harness
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_metric_selection() {
    let run = || -> Result<(), String> {
        let clean = toy_clean(12, 12, 1100);
        let pairs: Vec<(Image, Image)> = (0..20)
            .map(|i| (clean.clone(), rand_image(12, 12, 1200 + i)))
            .collect();
        let ratios = [0.0, 0.25, 0.5, 0.75, 1.0];
        let mse = |a: &Image, b: &Image| -> f64 {
            a.pixels()
                .iter()
                .zip(b.pixels())
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum::<f64>()
                / a.pixels().len() as f64
        };

        let anchor = clean.clone();
        let neg = |img: &Image| Ok(-mse(img, &anchor));
        let rate = monotonicity_rate(neg, &pairs, &ratios, None).map_err(|e| e.to_string())?;
        check!(rate == 1.0, "-MSE rate {rate} != 1.0");

        let pos = |img: &Image| Ok(mse(img, &anchor));
        let rate = monotonicity_rate(pos, &pairs, &ratios, None).map_err(|e| e.to_string())?;
        check!(rate == 0.0, "+MSE rate {rate} != 0.0");

        // strictly increasing transforms preserve the pass/fail
        // pattern exactly (tolerance resolved per transformed series)
        let exp = |img: &Image| Ok((-mse(img, &anchor) * 0.5).exp());
        let rate = monotonicity_rate(exp, &pairs, &ratios, None).map_err(|e| e.to_string())?;
        check!(rate == 1.0, "exp-transformed rate {rate} != 1.0");
        let affine = |img: &Image| Ok(3.0 * -mse(img, &anchor) + 11.0);
        let rate = monotonicity_rate(affine, &pairs, &ratios, None).map_err(|e| e.to_string())?;
        check!(rate == 1.0, "affine-transformed rate {rate} != 1.0");
        Ok(())
    };
    verdict(8, "mixture monotonicity harness agrees with the MSE oracle", run());
}

// ---------------------------------------------------------------------------
// 9. Metric correctness
// ---------------------------------------------------------------------------

/// Independent SSIM: same published recipe, rebuilt from scratch
/// (separately normalized window, coordinate-walk accumulation).
fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let (h, w) = (a.height(), a.width());
    let la: Vec<f64> = a.luminance().iter().map(|&v| v as f64).collect();
    let lb: Vec<f64> = b.luminance().iter().map(|&v| v as f64).collect();
    let mut win = [[0.0f64; 11]; 11];
    let mut norm = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let dy = i as f64 - 5.0;
            let dx = j as f64 - 5.0;
            *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
            norm += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0usize;
    for top in 0..=(h - 11) {
        for left in 0..=(w - 11) {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wgt = win[i][j] / norm;
                    ma += wgt * la[(top + i) * w + left + j];
                    mb += wgt * lb[(top + i) * w + left + j];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wgt = win[i][j] / norm;
                    let da = la[(top + i) * w + left + j] - ma;
                    let db = lb[(top + i) * w + left + j] - mb;
                    va += wgt * da * da;
                    vb += wgt * db * db;
                    cov += wgt * da * db;
                }
            }
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

#[test]
fn criterion_09_metric_correctness() {
    let run = || -> Result<(), String> {
        // PSNR against the direct formula
        for trial in 0..20u64 {
            let a = rand_image(12, 12, 40_000 + trial);
            let b = rand_image(12, 12, 41_000 + trial);
            let mse = a
                .pixels()
                .iter()
                .zip(b.pixels())
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum::<f64>()
                / a.pixels().len() as f64;
            let want = -10.0 * mse.log10();
            let got = psnr(&a, &b).map_err(|e| e.to_string())?;
            check!(
                (got - want).abs() <= 1e-4,
                "PSNR trial {trial}: {got} vs {want}"
            );
        }

        // SSIM against the independent implementation
        for trial in 0..20u64 {
            let a = rand_image(16, 16, 42_000 + trial);
            let b = rand_image(16, 16, 43_000 + trial);
            let got = ssim(&a, &b).map_err(|e| e.to_string())?;
            let want = ssim_oracle(&a, &b);
            check!(
                (got - want).abs() <= 1e-3,
                "SSIM trial {trial}: {got} vs {want}"
            );
            let identity = ssim(&a, &a).map_err(|e| e.to_string())?;
            check!((identity - 1.0).abs() <= 1e-9, "SSIM self {identity}");
        }

        // PLCC against the raw-moment textbook formula
        let mut rng = ChaCha8Rng::seed_from_u64(44_000);
        for trial in 0..20 {
            let n = 30;
            let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..9.0)).collect();
            let ys: Vec<f64> = xs
                .iter()
                .map(|x| 0.4 * x + rng.gen_range(-1.0..1.0))
                .collect();
            let nf = n as f64;
            let (sx, sy): (f64, f64) = (xs.iter().sum(), ys.iter().sum());
            let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
            let sxx: f64 = xs.iter().map(|x| x * x).sum();
            let syy: f64 = ys.iter().map(|y| y * y).sum();
            let want = (nf * sxy - sx * sy)
                / ((nf * sxx - sx * sx).sqrt() * (nf * syy - sy * sy).sqrt());
            let got = plcc(&xs, &ys).map_err(|e| e.to_string())?;
            check!(
                (got - want).abs() <= 1e-9,
                "PLCC trial {trial}: {got} vs {want}"
            );
        }

        // no-reference composites: exact zero on achromatic constants
        for &level in &[0.2f32, 0.5, 0.8] {
            let flat = Image::constant(16, 16, level).unwrap();
            let u = uiqm_components(&flat).map_err(|e| e.to_string())?;
            check!(
                u.uicm == 0.0 && u.uism == 0.0 && u.uiconm == 0.0,
                "UIQM on constant {level}: {u:?}"
            );
            let c = uciqe_components(&flat).map_err(|e| e.to_string())?;
            check!(
                c.sigma_chroma.abs() < 1e-9 && c.con_lum.abs() < 1e-9 && c.mean_sat.abs() < 1e-9,
                "UCIQE on constant {level}: {c:?}"
            );
        }

        // component-level recombination oracles on random images
        for trial in 0..20u64 {
            let img = rand_image(16, 16, 45_000 + trial);
            let u = uiqm_components(&img).map_err(|e| e.to_string())?;
            let recombined = 0.0282 * u.uicm + 0.2953 * u.uism + 3.5753 * u.uiconm;
            let got = uie_core::iqa::uiqm(&img).map_err(|e| e.to_string())?;
            check!(
                (got - recombined).abs() <= 1e-2,
                "UIQM trial {trial}: {got} vs {recombined}"
            );
            let c = uciqe_components(&img).map_err(|e| e.to_string())?;
            let recombined = 0.4680 * c.sigma_chroma + 0.2745 * c.con_lum + 0.2576 * c.mean_sat;
            let got = uie_core::iqa::uciqe(&img).map_err(|e| e.to_string())?;
            check!(
                (got - recombined).abs() <= 1e-3,
                "UCIQE trial {trial}: {got} vs {recombined}"
            );
        }
        Ok(())
    };
    verdict(9, "quality metrics match independent oracles", run());
}

// ---------------------------------------------------------------------------
// 10. Architecture invariants
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_architecture_invariants() {
    let run = || -> Result<(), String> {
        // shuffle/unshuffle roundtrip identity over 200 random shapes
        let mut rng = ChaCha8Rng::seed_from_u64(50_000);
        for trial in 0..200 {
            let r = rng.gen_range(2..=4usize);
            let h = r * rng.gen_range(1..=6usize);
            let w = r * rng.gen_range(1..=6usize);
            let c = rng.gen_range(1..=8usize);
            let t = Tensor::from_vec(
                &[h, w, c],
                (0..h * w * c).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let fm = FeatureMap::new(t, 0).unwrap();
            let down = pixel_unshuffle(&fm, r).map_err(|e| e.to_string())?;
            check!(
                down.shape() == (h / r, w / r, c * r * r),
                "trial {trial}: unshuffle shape {:?}",
                down.shape()
            );
            let back = pixel_shuffle(&down, r).map_err(|e| e.to_string())?;
            check!(
                back.values().data() == fm.values().data(),
                "trial {trial}: roundtrip not the identity for r={r} {h}x{w}x{c}"
            );
        }

        // forward shape preservation and output range under fuzzing
        let net = NetworkConfig::tiny();
        for &size in &[64usize, 128] {
            for k in 0..2u64 {
                let params = init_network(&net, 900 + k).unwrap();
                let img = rand_image(size, size, 51_000 + size as u64 + k);
                let out = forward_enhance(&img, &params, &net).map_err(|e| e.to_string())?;
                check!(
                    out.height() == size && out.width() == size,
                    "{size}px trial {k}: output {}x{}",
                    out.height(),
                    out.width()
                );
                check!(
                    out.pixels().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
                    "{size}px trial {k}: output left [0,1]"
                );
            }
        }

        // attention rows are probability distributions
        let params = init_network(&net, 902).unwrap();
        let built = build_network(&net, 16, 16).map_err(|e| e.to_string())?;
        let mut feeds = built.feeds(&params).map_err(|e| e.to_string())?;
        feeds.insert(built.input, rand_image(16, 16, 52_000).to_tensor());
        let exec = built.program.forward(&feeds);
        check!(!built.attention_probes.is_empty(), "no attention probes exposed");
        for &probe in &built.attention_probes {
            let t = exec.value(probe);
            let cols = t.shape()[t.shape().len() - 1];
            for (i, row) in t.data().chunks_exact(cols).enumerate() {
                let s: f64 = row.iter().sum();
                check!(
                    (s - 1.0).abs() < 1e-5,
                    "attention row {i} sums to {s}"
                );
            }
        }
        Ok(())
    };
    verdict(10, "index permutations, forward ranges, attention normalization", run());
}

// ---------------------------------------------------------------------------
// 11. Determinism & persistence
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_determinism_persistence() {
    let run = || -> Result<(), String> {
        let net = NetworkConfig::tiny();
        let pairs = toy_pairs(4, 16, 1300);
        let cfg = PretrainConfig {
            epochs: 10,
            lr: 1e-3,
            schedule: vec![ScheduleStage { start_epoch: 0, batch_size: 2, patch_size: 16 }],
            seed: 110,
            ..PretrainConfig::default()
        };
        let a = pretrain(&pairs, &net, &cfg).map_err(|e| e.to_string())?;
        let b = pretrain(&pairs, &net, &cfg).map_err(|e| e.to_string())?;
        check!(
            a.checkpoint.params.digest() == b.checkpoint.params.digest(),
            "same-seed pretrain digests differ"
        );
        check!(a.log == b.log, "same-seed pretrain logs differ");

        // save → load → resume matches the uninterrupted run
        let scorer = ProxyScorer::new();
        let inputs: Vec<(Image, SourceTag)> = (0..4)
            .map(|i| (toy_degrade(&toy_clean(16, 16, 1400 + i)), SourceTag::NonReference))
            .collect();
        let records = generate_pseudo_labels(&inputs, &a.checkpoint, &net, &scorer)
            .map_err(|e| e.to_string())?;
        let fcfg = FinetuneConfig {
            steps: 10,
            batch_size: 2,
            lr: 1e-4,
            seed: 111,
            ..FinetuneConfig::default()
        };
        let straight = finetune(&records, &a.checkpoint, &scorer, &IdentityExtractor, &net, &fcfg)
            .map_err(|e| e.to_string())?;
        let half = finetune_span(
            &records,
            &a.checkpoint,
            &scorer,
            &IdentityExtractor,
            &net,
            &fcfg,
            Some(5),
        )
        .map_err(|e| e.to_string())?;
        let dir = std::env::temp_dir().join(format!("uie-acceptance-{}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let path = dir.join("half.ckpt");
        half.checkpoint.save(&path).map_err(|e| e.to_string())?;
        let restored = Checkpoint::load(&path).map_err(|e| e.to_string())?;
        let resumed = finetune(&records, &restored, &scorer, &IdentityExtractor, &net, &fcfg)
            .map_err(|e| e.to_string())?;
        let _ = std::fs::remove_dir_all(&dir);
        check!(resumed.log.len() == 5, "resume ran {} steps, wanted 5", resumed.log.len());
        for (cont, orig) in resumed.log.iter().zip(&straight.log[5..]) {
            check!(
                (cont.total - orig.total).abs() <= 1e-6
                    && (cont.pixel - orig.pixel).abs() <= 1e-6
                    && (cont.perceptual - orig.perceptual).abs() <= 1e-6,
                "step {}: resumed losses diverged ({} vs {})",
                cont.step,
                cont.total,
                orig.total
            );
        }
        check!(
            resumed.checkpoint.params.digest() == straight.checkpoint.params.digest(),
            "resumed final parameters differ from the uninterrupted run"
        );
        Ok(())
    };
    verdict(11, "seeded determinism and checkpoint-resume fidelity", run());
}

// ---------------------------------------------------------------------------
// 12. Domain diagnostics
// ---------------------------------------------------------------------------

#[test]
fn criterion_12_domain_diagnostics() {
    let run = || -> Result<(), String> {
        let set: Vec<Image> = (0..5).map(|i| rand_image(8, 8, 1500 + i)).collect();
        let zero = domain_discrepancy(&set, &set).map_err(|e| e.to_string())?;
        check!(zero == 0.0, "identical sets gave {zero}");

        // uniform +0.1 offset: squared distance 0.01 per component
        let base: Vec<Image> = (0..5).map(|i| rand_image_in(8, 8, 1600 + i, 0.0, 0.8)).collect();
        let shifted: Vec<Image> = base
            .iter()
            .map(|img| {
                Image::new(
                    img.height(),
                    img.width(),
                    img.pixels().iter().map(|&v| v + 0.1).collect(),
                )
                .unwrap()
            })
            .collect();
        let d = domain_discrepancy(&base, &shifted).map_err(|e| e.to_string())?;
        check!((d - 0.01).abs() <= 1e-6, "offset discrepancy {d} vs 0.01");

        // identity-extractor feature shift on exactly representable
        // values: delta = 0.125 over 8x8 gives 3*64*0.125^2 = 3.0
        let quarters: Vec<Image> = vec![
            Image::constant(8, 8, 0.25).unwrap(),
            Image::constant(8, 8, 0.375).unwrap(),
        ];
        let plus: Vec<Image> = vec![
            Image::constant(8, 8, 0.375).unwrap(),
            Image::constant(8, 8, 0.5).unwrap(),
        ];
        let report = feature_shift(&quarters, &plus, &IdentityExtractor)
            .map_err(|e| e.to_string())?;
        let want = 3.0 * 64.0 * 0.125 * 0.125;
        check!(
            (report.delta_feat - want).abs() <= 1e-6,
            "feature shift {} vs {want}",
            report.delta_feat
        );
        Ok(())
    };
    verdict(12, "domain and feature-shift diagnostics hit closed forms", run());
}

// ---------------------------------------------------------------------------
// 13. Full-scale config fidelity
// ---------------------------------------------------------------------------

#[test]
fn criterion_13_config_fidelity() {
    let run = || -> Result<(), String> {
        let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/full");
        let pre = load_pretrain_config(&root.join("pretrain.cfg")).map_err(|e| e.to_string())?;
        check!(pre.config.epochs == 380, "pretrain epochs {}", pre.config.epochs);
        check!(pre.config.lr == 3e-4, "pretrain lr {}", pre.config.lr);
        check!(
            pre.splits.get("split_lsui") == Some(&3879) && pre.splits.get("split_uieb") == Some(&800),
            "pretrain splits {:?}",
            pre.splits
        );

        let fine = load_finetune_config(&root.join("finetune.cfg")).map_err(|e| e.to_string())?;
        check!(fine.config.lr == 1e-5, "finetune lr {}", fine.config.lr);
        check!(fine.config.steps == 1000, "finetune steps {}", fine.config.steps);
        check!(fine.config.batch_size == 2, "finetune batch {}", fine.config.batch_size);
        check!(
            fine.config.weights.lambda3 == 0.003,
            "finetune lambda3 {}",
            fine.config.weights.lambda3
        );
        check!(
            fine.splits.get("split_ruie") == Some(&3830)
                && fine.splits.get("split_euvp") == Some(&3870)
                && fine.splits.get("split_lsui") == Some(&2300),
            "finetune splits {:?}",
            fine.splits
        );
        Ok(())
    };
    verdict(13, "shipped full-scale configs carry the published values", run());
}
