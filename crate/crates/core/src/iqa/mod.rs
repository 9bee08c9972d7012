//! Image quality assessment: full-reference metrics (PSNR, SSIM),
//! no-reference composites (colorfulness/sharpness/contrast and
//! chroma/contrast/saturation), a natural-scene-statistics distance,
//! correlation statistics, and the pluggable differentiable quality
//! scorer used during fine-tuning.

pub mod constants;
mod fullref;
mod niqe;
mod proxy;
mod stats;
mod uciqe;
mod uiqm;

pub use fullref::{psnr, ssim};
pub use niqe::{niqe_fit, niqe_score, NiqeModel};
pub use proxy::ProxyScorer;
pub use stats::plcc;
pub use uciqe::{uciqe, uciqe_components, UciqeComponents};
pub use uiqm::{uiqm, uiqm_components, UiqmComponents};

use crate::error::Result;
use crate::graph::{GraphBuilder, NodeId};
use crate::image::Image;
use crate::params::ParameterStore;

/// A no-reference quality model with frozen parameters. Implementations
/// must be deterministic; `score` and `build_score` must agree.
pub trait QualityScorer: Sync {
    /// Stable identifier recorded in logs and reports.
    fn tag(&self) -> &str;

    /// Whether [`build_score`] is available for gradient-based use.
    ///
    /// [`build_score`]: QualityScorer::build_score
    fn is_differentiable(&self) -> bool;

    /// Inclusive-exclusive bounds (lo, hi) that `score` never leaves.
    fn score_range(&self) -> (f64, f64);

    /// Evaluate the scorer on an image.
    fn score(&self, img: &Image) -> Result<f64>;

    /// Append the scorer to a graph over an (h, w, 3) node, returning
    /// the scalar score node; `None` for non-differentiable scorers.
    fn build_score(&self, gb: &mut GraphBuilder, x: NodeId) -> Option<NodeId>;

    /// The frozen parameters (digest these to check the freeze
    /// contract).
    fn parameters(&self) -> &ParameterStore;
}
