//! Empty library; the crate exists for its Criterion benchmark
//! targets (see `benches/pipeline.rs`).
