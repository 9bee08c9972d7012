//! Error taxonomy shared by every module in the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum UieError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("load error: {0}")]
    Load(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("grid error: {0}")]
    Grid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("extractor error: {0}")]
    Extractor(String),

    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("metric failure on pair {pair}: {source}")]
    MetricFailure {
        pair: usize,
        #[source]
        source: Box<UieError>,
    },
}

pub type Result<T> = std::result::Result<T, UieError>;

impl UieError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UieError::Io {
            path: path.into(),
            source,
        }
    }
}
