//! Core library of the underwater image enhancement toolkit: imaging
//! primitives, a reverse-mode compute graph, the enhancement network,
//! training loops, quality metrics, and domain-shift diagnostics.

pub mod config;
pub mod domain;
pub mod error;
pub mod extractor;
pub mod graph;
pub mod image;
pub mod iqa;
pub mod kernels;
pub mod loss;
pub mod manifest;
pub mod net;
pub mod params;
pub mod rng;
pub mod select;
pub mod tensor;
pub mod train;

pub use error::{Result, UieError};
pub use image::{Image, ImagePair};
pub use tensor::Tensor;
