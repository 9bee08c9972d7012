//! Pluggable feature extractors for the perceptual loss and the
//! domain-shift diagnostics.
//!
//! The default is a small frozen convolutional pyramid with fixed-seed
//! random filters: three stride-2 3×3 stages with tanh activations.
//! Random frozen projections preserve distances well enough for a
//! perceptual penalty and keep the test suite free of downloaded
//! weights; a pretrained backbone can be plugged in through the same
//! trait.

use rand::Rng;

use crate::error::{Result, UieError};
use crate::graph::{GraphBuilder, NodeId, Program};
use crate::image::Image;
use crate::kernels::ConvSpec;
use crate::params::ParameterStore;
use crate::rng::stream_rng;
use crate::tensor::Tensor;

/// Maps images to feature vectors, with a graph-side twin for use
/// inside differentiable losses.
pub trait FeatureExtractor: Sync {
    /// Stable identifier recorded in reports.
    fn tag(&self) -> &'static str;

    /// Feature values grouped by stage; losses average within each
    /// stage before averaging across stages.
    fn staged_features(&self, img: &Image) -> Result<Vec<Vec<f64>>>;

    /// Flat feature vector for statistics (means, shifts).
    fn features(&self, img: &Image) -> Result<Vec<f64>> {
        Ok(self.staged_features(img)?.into_iter().flatten().collect())
    }

    /// Append the extractor to a graph; returns one node per feature
    /// stage. Must be the same computation as [`staged_features`].
    ///
    /// [`staged_features`]: FeatureExtractor::staged_features
    fn build(&self, gb: &mut GraphBuilder, x: NodeId) -> Vec<NodeId>;
}

/// The identity map: features are the raw pixels. Useful as an oracle
/// (perceptual loss collapses to pixel loss, feature shift collapses to
/// mean pixel shift).
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn tag(&self) -> &'static str {
        "identity"
    }

    fn staged_features(&self, img: &Image) -> Result<Vec<Vec<f64>>> {
        Ok(vec![img.pixels().iter().map(|&v| v as f64).collect()])
    }

    fn build(&self, _gb: &mut GraphBuilder, x: NodeId) -> Vec<NodeId> {
        vec![x]
    }
}

/// Channel widths of the three pyramid stages.
const STAGE_CHANNELS: [usize; 3] = [8, 16, 32];
/// Seed for the frozen random filters; changing it changes the loss
/// landscape, so it is part of the definition.
pub const PYRAMID_SEED: u64 = 2024;

/// Frozen random convolutional pyramid: 3×3 stride-2 convolutions with
/// tanh, channels 3 → 8 → 16 → 32.
pub struct ConvPyramidExtractor {
    params: ParameterStore,
}

impl Default for ConvPyramidExtractor {
    fn default() -> Self {
        Self::new(PYRAMID_SEED)
    }
}

impl ConvPyramidExtractor {
    pub fn new(seed: u64) -> Self {
        let mut params = ParameterStore::new();
        let mut cin = 3;
        for (i, &cout) in STAGE_CHANNELS.iter().enumerate() {
            let mut rng = stream_rng(seed, "extractor.stage", i as u64);
            // tanh-friendly fan-in scaling keeps activations in range
            let bound = (1.0 / (9 * cin) as f64).sqrt();
            let n = 3 * 3 * cin * cout;
            let w = Tensor::from_vec(
                &[3, 3, cin, cout],
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
            )
            .unwrap();
            params.insert_with(&format!("stage{i}.w"), w, false);
            cin = cout;
        }
        Self { params }
    }

    /// Digest of the frozen filters, for freeze checks.
    pub fn digest(&self) -> String {
        self.params.digest()
    }
}

impl FeatureExtractor for ConvPyramidExtractor {
    fn tag(&self) -> &'static str {
        "conv-pyramid"
    }

    fn staged_features(&self, img: &Image) -> Result<Vec<Vec<f64>>> {
        if img.height() < 4 || img.width() < 4 {
            return Err(UieError::Extractor(format!(
                "image {}x{} too small for the pyramid",
                img.height(),
                img.width()
            )));
        }
        let mut gb = GraphBuilder::new();
        let x = gb.feed(&[img.height(), img.width(), 3]);
        let stages = self.build(&mut gb, x);
        let program: Program = gb.finish();
        let mut feeds = std::collections::BTreeMap::new();
        feeds.insert(x, img.to_tensor());
        let exec = program.forward_inference(&feeds, &stages);
        Ok(stages
            .iter()
            .map(|&s| exec.value(s).data().to_vec())
            .collect())
    }

    fn build(&self, gb: &mut GraphBuilder, x: NodeId) -> Vec<NodeId> {
        let mut stages = Vec::new();
        let mut cur = x;
        for i in 0..STAGE_CHANNELS.len() {
            let w = self.params.get(&format!("stage{i}.w")).unwrap().clone();
            let wn = gb.constant(w);
            let conv = gb.conv2d(cur, wn, None, ConvSpec { stride: 2, pad: 1, groups: 1 });
            cur = gb.tanh(conv);
            stages.push(cur);
        }
        stages
    }
}
