//! Combination coefficients of the composite no-reference metrics.
//!
//! These weights come from the metrics' original publications (they are
//! community-standard constants, reproduced here so every use site
//! shares one transcription). Tests exercise the formulas against
//! independently coded oracles rather than trusting these numbers.

/// Chroma/contrast/saturation composite: weight of the chroma standard
/// deviation term.
pub const UCIQE_W_SIGMA_CHROMA: f64 = 0.4680;
/// Weight of the luminance-contrast (percentile spread) term.
pub const UCIQE_W_CON_LUM: f64 = 0.2745;
/// Weight of the mean-saturation term.
pub const UCIQE_W_MEAN_SAT: f64 = 0.2576;

/// Colorfulness/sharpness/contrast composite: component weights.
pub const UIQM_W_COLOR: f64 = 0.0282;
pub const UIQM_W_SHARP: f64 = 0.2953;
pub const UIQM_W_CONTRAST: f64 = 3.5753;

/// Colorfulness term: weight on the chromatic-bias magnitude (negative:
/// a strong color cast is penalized) and on the chromatic spread.
pub const UICM_W_MU: f64 = -0.0268;
pub const UICM_W_SIGMA: f64 = 0.1586;
/// Fraction trimmed from each tail of the opponent-channel samples.
pub const UICM_ALPHA_TRIM: f64 = 0.1;

/// Luma weights shared by the sharpness term and RGB→luminance maps.
pub const LUMA_R: f64 = 0.299;
pub const LUMA_G: f64 = 0.587;
pub const LUMA_B: f64 = 0.114;

/// Block edge length of the blockwise enhancement measures.
pub const UIQM_BLOCK: usize = 8;
