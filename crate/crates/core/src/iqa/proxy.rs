//! Differentiable stand-in quality scorer.
//!
//! Scores an image on (0, 100) from three smooth statistics — global
//! luminance contrast, opponent-axis colorfulness, and Laplacian
//! sharpness — each squashed through `tanh` and combined with frozen
//! weights. The eager path and the graph path share one construction,
//! so they agree by design; every statistic vanishes on a constant
//! image, making the score there (numerically) zero.

use super::QualityScorer;
use crate::error::{Result, UieError};
use crate::graph::{GraphBuilder, NodeId};
use crate::image::Image;
use crate::kernels::ConvSpec;
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Smoothing constant inside each square root.
const COMPONENT_EPS: f64 = 1e-8;
/// Default per-component mixing weights (sum to one).
const DEFAULT_W: [f64; 3] = [0.5, 0.25, 0.25];
/// Default soft saturation points for contrast / color / sharpness.
const DEFAULT_SCALE: [f64; 3] = [0.15, 0.15, 0.3];
/// Output multiplier mapping the weighted sum onto (0, 100).
const SCORE_SPAN: f64 = 100.0;

/// Frozen-parameter, fully differentiable quality scorer.
pub struct ProxyScorer {
    params: ParameterStore,
}

impl Default for ProxyScorer {
    fn default() -> Self {
        Self::new()
    }
}

impl ProxyScorer {
    /// Scorer with the built-in weights and scales, all frozen.
    pub fn new() -> Self {
        let mut params = ParameterStore::new();
        params.insert_with(
            "w",
            Tensor::from_vec(&[3], DEFAULT_W.to_vec()).unwrap(),
            false,
        );
        params.insert_with(
            "scale",
            Tensor::from_vec(&[3], DEFAULT_SCALE.to_vec()).unwrap(),
            false,
        );
        Self { params }
    }

    /// Scorer over externally supplied parameters; `w` and `scale` must
    /// both be present with three positive scale entries. All entries
    /// are frozen regardless of their stored flag.
    pub fn with_params(mut params: ParameterStore) -> Result<Self> {
        for name in ["w", "scale"] {
            let t = params
                .get(name)
                .ok_or_else(|| UieError::Config(format!("scorer parameter '{name}' missing")))?;
            if t.shape() != [3] {
                return Err(UieError::Config(format!(
                    "scorer parameter '{name}' must have shape [3], got {:?}",
                    t.shape()
                )));
            }
        }
        if params.get("scale").unwrap().data().iter().any(|&s| s <= 0.0) {
            return Err(UieError::Config("scorer scales must be positive".into()));
        }
        params.freeze_all();
        Ok(Self { params })
    }

    /// Mean and variance of a node, via first and second raw moments.
    fn moments(gb: &mut GraphBuilder, x: NodeId) -> (NodeId, NodeId) {
        let m = gb.mean_all(x);
        let xx = gb.mul(x, x);
        let m2 = gb.mean_all(xx);
        let mm = gb.mul(m, m);
        (m, gb.sub(m2, mm))
    }

    /// sqrt(x + eps) − sqrt(eps): smooth everywhere, zero at x = 0.
    fn smooth_sqrt(gb: &mut GraphBuilder, x: NodeId) -> NodeId {
        let s = gb.sqrt_eps(x, COMPONENT_EPS);
        gb.add_const(s, -COMPONENT_EPS.sqrt())
    }

    /// Append the score computation over an (h, w, 3) node. Both the
    /// eager and graph entry points funnel through here.
    fn attach(&self, gb: &mut GraphBuilder, input: NodeId) -> NodeId {
        let shape = gb.shape(input).to_vec();
        assert_eq!(shape.len(), 3, "scorer input must be (h, w, 3)");
        assert_eq!(shape[2], 3, "scorer input must have 3 channels");
        assert!(
            shape[0] >= 3 && shape[1] >= 3,
            "scorer needs at least 3x3 images"
        );
        let r = gb.slice_last(input, 0, 1);
        let g = gb.slice_last(input, 1, 2);
        let b = gb.slice_last(input, 2, 3);

        // global luminance contrast
        let rl = gb.mul_const(r, 0.299);
        let gl = gb.mul_const(g, 0.587);
        let bl = gb.mul_const(b, 0.114);
        let rg_sum = gb.add(rl, gl);
        let luma = gb.add(rg_sum, bl);
        let (_, var_luma) = Self::moments(gb, luma);
        let contrast = Self::smooth_sqrt(gb, var_luma);

        // opponent-axis colorfulness
        let rg = gb.sub(r, g);
        let r_plus_g = gb.add(r, g);
        let half_rg = gb.mul_const(r_plus_g, 0.5);
        let yb = gb.sub(half_rg, b);
        let (_, var_rg) = Self::moments(gb, rg);
        let (_, var_yb) = Self::moments(gb, yb);
        let chroma_var = gb.add(var_rg, var_yb);
        let color = Self::smooth_sqrt(gb, chroma_var);

        // Laplacian sharpness over valid (interior) positions only, so
        // a constant image produces an exactly zero response map
        let kernel = gb.constant(
            Tensor::from_vec(
                &[3, 3, 1, 1],
                vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
            )
            .unwrap(),
        );
        let lap = gb.conv2d(
            luma,
            kernel,
            None,
            ConvSpec { stride: 1, pad: 0, groups: 1 },
        );
        let lap_sq = gb.mul(lap, lap);
        let lap_power = gb.mean_all(lap_sq);
        let sharp = Self::smooth_sqrt(gb, lap_power);

        let comps = gb.concat_last(&[contrast, color, sharp]);
        let scale = gb.constant(self.params.get("scale").unwrap().clone());
        let w = gb.constant(self.params.get("w").unwrap().clone());
        let ratio = gb.div(comps, scale);
        let squashed = gb.tanh(ratio);
        let weighted = gb.mul(squashed, w);
        let total = gb.sum_all(weighted);
        gb.mul_const(total, SCORE_SPAN)
    }
}

impl QualityScorer for ProxyScorer {
    fn tag(&self) -> &str {
        "proxy"
    }

    fn is_differentiable(&self) -> bool {
        true
    }

    fn score_range(&self) -> (f64, f64) {
        (0.0, SCORE_SPAN)
    }

    fn score(&self, img: &Image) -> Result<f64> {
        if img.height() < 3 || img.width() < 3 {
            return Err(UieError::Size(format!(
                "scorer needs at least 3x3, got {}x{}",
                img.height(),
                img.width()
            )));
        }
        let mut gb = GraphBuilder::new();
        let input = gb.feed(&[img.height(), img.width(), 3]);
        let score = self.attach(&mut gb, input);
        let program = gb.finish();
        let mut feeds = BTreeMap::new();
        feeds.insert(input, img.to_tensor());
        let exec = program.forward_inference(&feeds, &[score]);
        Ok(exec.value(score).item())
    }

    fn build_score(&self, gb: &mut GraphBuilder, x: NodeId) -> Option<NodeId> {
        Some(self.attach(gb, x))
    }

    fn parameters(&self) -> &ParameterStore {
        &self.params
    }
}
