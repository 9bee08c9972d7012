//! Training objectives: mean-absolute pixel loss, correlation loss,
//! perceptual feature loss, and the weighted fine-tuning total with a
//! quality-score term.
//!
//! Each objective exists twice, by design: an eager f64 evaluation on
//! [`Image`]s (for logging and tests) and a graph builder producing a
//! differentiable scalar node. Tests pin the two against each other.

use crate::error::{Result, UieError};
use crate::extractor::FeatureExtractor;
use crate::graph::{GraphBuilder, NodeId};
use crate::image::Image;

/// Variance guard inside the differentiable correlation; keeps the
/// gradient finite if an optimizer step lands on a constant image.
pub const CORR_EPS: f64 = 1e-12;

/// Weights of the fine-tuning objective: `lambda1` on the pixel term,
/// `lambda2` on the perceptual term, `lambda3` on the score term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // lambda3 is the score coefficient the method is calibrated
        // around; the other two are implementer defaults.
        Self { lambda1: 1.0, lambda2: 0.5, lambda3: 0.003 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(UieError::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// One evaluation of the fine-tuning objective, split into parts.
/// `score` is the gap q_pred − q_ref (may be negative); the other
/// parts are non-negative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub pixel: f64,
    pub perceptual: f64,
    pub score: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// True iff total reassembles from the parts under `w` within tol.
    pub fn consistent_with(&self, w: &LossWeights, tol: f64) -> bool {
        let expect = w.lambda1 * self.pixel + w.lambda2 * self.perceptual - w.lambda3 * self.score;
        (self.total - expect).abs() <= tol
    }
}

/// Mean absolute difference over all components.
pub fn pixel_loss(pred: &Image, target: &Image) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(UieError::Shape(format!(
            "pixel loss on {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            target.height(),
            target.width()
        )));
    }
    let n = pred.pixels().len();
    let sum: f64 = pred
        .pixels()
        .iter()
        .zip(target.pixels())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(sum / n as f64)
}

/// Population correlation coefficient of the flattened images.
pub fn pearson_corr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(UieError::Shape("correlation on mismatched shapes".into()));
    }
    let n = a.pixels().len() as f64;
    let mean = |img: &Image| img.pixels().iter().map(|&v| v as f64).sum::<f64>() / n;
    let (ma, mb) = (mean(a), mean(b));
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.pixels().iter().zip(b.pixels()) {
        let dx = x as f64 - ma;
        let dy = y as f64 - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(UieError::Degenerate(
            "correlation undefined for a constant image".into(),
        ));
    }
    Ok((cov / n) / ((va / n).sqrt() * (vb / n).sqrt()))
}

/// Correlation loss (1 − ρ)/2 ∈ [0, 1]; 0 at perfect positive
/// correlation, 1 at perfect negative correlation.
pub fn pearson_loss(pred: &Image, target: &Image) -> Result<f64> {
    Ok((1.0 - pearson_corr(pred, target)?) / 2.0)
}

/// Mean absolute feature difference, averaged over extractor stages.
pub fn perceptual_loss(
    pred: &Image,
    target: &Image,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(UieError::Shape("perceptual loss on mismatched shapes".into()));
    }
    let fa = extractor.staged_features(pred)?;
    let fb = extractor.staged_features(target)?;
    if fa.len() != fb.len() {
        return Err(UieError::Extractor("stage count mismatch".into()));
    }
    let mut acc = 0.0;
    for (sa, sb) in fa.iter().zip(&fb) {
        if sa.len() != sb.len() || sa.is_empty() {
            return Err(UieError::Extractor("stage length mismatch".into()));
        }
        let s: f64 = sa.iter().zip(sb).map(|(x, y)| (x - y).abs()).sum();
        acc += s / sa.len() as f64;
    }
    Ok(acc / fa.len() as f64)
}

/// The fine-tuning objective on one sample:
/// total = λ1·pixel + λ2·perceptual − λ3·(q_pred − q_ref).
/// `q_ref` is a plain number here and a baked constant in the graph
/// twin, so no gradient ever reaches it.
pub fn total_loss(
    pred: &Image,
    pseudo: &Image,
    q_pred: f64,
    q_ref: f64,
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let pixel = pixel_loss(pred, pseudo)?;
    let perceptual = perceptual_loss(pred, pseudo, extractor)?;
    let score = q_pred - q_ref;
    let total = weights.lambda1 * pixel + weights.lambda2 * perceptual - weights.lambda3 * score;
    Ok(LossBreakdown { pixel, perceptual, score, total })
}

/// Graph twin of [`pixel_loss`].
pub fn build_pixel_loss(gb: &mut GraphBuilder, pred: NodeId, target: NodeId) -> NodeId {
    let d = gb.sub(pred, target);
    let a = gb.abs(d);
    gb.mean_all(a)
}

/// Graph twin of [`pearson_loss`]. Variances are guarded by
/// [`CORR_EPS`] instead of erroring: inside a training graph a hard
/// failure is useless, and the guard only matters within ~1e-6 of an
/// exactly constant image.
pub fn build_pearson_loss(gb: &mut GraphBuilder, pred: NodeId, target: NodeId) -> NodeId {
    let center = |gb: &mut GraphBuilder, x: NodeId| {
        let m = gb.mean_all(x);
        let neg = gb.mul_const(m, -1.0);
        gb.scalar_add(x, neg)
    };
    let ac = center(gb, pred);
    let bc = center(gb, target);
    let ab = gb.mul(ac, bc);
    let cov = gb.mean_all(ab);
    let aa = gb.mul(ac, ac);
    let va = gb.mean_all(aa);
    let bb = gb.mul(bc, bc);
    let vb = gb.mean_all(bb);
    let sa = gb.sqrt_eps(va, CORR_EPS);
    let sb = gb.sqrt_eps(vb, CORR_EPS);
    let denom = gb.mul(sa, sb);
    let rho = gb.div(cov, denom);
    let neg_rho = gb.mul_const(rho, -1.0);
    let one_minus = gb.add_const(neg_rho, 1.0);
    gb.mul_const(one_minus, 0.5)
}

/// Graph twin of [`perceptual_loss`].
pub fn build_perceptual_loss(
    gb: &mut GraphBuilder,
    pred: NodeId,
    target: NodeId,
    extractor: &dyn FeatureExtractor,
) -> NodeId {
    let fa = extractor.build(gb, pred);
    let fb = extractor.build(gb, target);
    assert_eq!(fa.len(), fb.len());
    let mut acc: Option<NodeId> = None;
    for (&a, &b) in fa.iter().zip(&fb) {
        let d = gb.sub(a, b);
        let ad = gb.abs(d);
        let m = gb.mean_all(ad);
        acc = Some(match acc {
            None => m,
            Some(prev) => gb.add(prev, m),
        });
    }
    let sum = acc.expect("extractor produced no stages");
    gb.mul_const(sum, 1.0 / fa.len() as f64)
}

/// Graph twin of the total objective. `q_pred` must be a scalar node;
/// `q_ref` is baked in as a constant.
pub fn build_total_loss(
    gb: &mut GraphBuilder,
    pred: NodeId,
    pseudo: NodeId,
    q_pred: Option<NodeId>,
    q_ref: f64,
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor,
) -> NodeId {
    let pix = build_pixel_loss(gb, pred, pseudo);
    let perc = build_perceptual_loss(gb, pred, pseudo, extractor);
    let wpix = gb.mul_const(pix, weights.lambda1);
    let wperc = gb.mul_const(perc, weights.lambda2);
    let mut total = gb.add(wpix, wperc);
    if let Some(q) = q_pred {
        let gap = gb.add_const(q, -q_ref);
        let neg = gb.mul_const(gap, -weights.lambda3);
        total = gb.add(total, neg);
    }
    total
}
