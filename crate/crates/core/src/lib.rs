//! Compressed-DNN toolchain: ADMM-based pruning/quantization and a
//! sparse-aware inference engine with layer fusion, pointwise-conv-to-GEMM
//! rewriting, tiled sparse kernels, and autotuned kernel parameters.

pub mod autotune;
pub mod compress;
pub mod engine;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod mnist;
pub mod model;
pub mod reference;
pub mod sparse;
pub mod tensor;

pub mod test_util;

pub use error::{Error, Result};
