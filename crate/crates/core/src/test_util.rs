//! Shared helpers for unit and integration tests.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::sparse::{csr_from_dense, SparseMatrixCsr};
use crate::tensor::{Layout, Tensor};

pub fn max_rel_err(got: &[f32], want: &[f32]) -> f32 {
    assert_eq!(got.len(), want.len(), "length mismatch");
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g - w).abs() / w.abs().max(1.0))
        .fold(0.0f32, f32::max)
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = StdRng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn random_nchw(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = StdRng::seed_from_u64(seed);
    let data = (0..n * c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(vec![n, c, h, w], Layout::Nchw, data).unwrap()
}

pub fn random_tensor4(a: usize, b: usize, c: usize, d: usize, seed: u64) -> Tensor {
    random_nchw(a, b, c, d, seed)
}

/// Random matrix with roughly `sparsity` fraction of exact zeros, in CSR form.
pub fn random_sparse_matrix(rows: usize, cols: usize, sparsity: f64, seed: u64) -> SparseMatrixCsr {
    let dense = random_sparse_dense(rows, cols, sparsity, seed);
    csr_from_dense(&dense).unwrap()
}

pub fn random_sparse_dense(rows: usize, cols: usize, sparsity: f64, seed: u64) -> Tensor {
    let mut rng = StdRng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| {
            if rng.random_bool(sparsity) {
                0.0
            } else {
                let v: f32 = rng.random_range(-1.0f32..1.0);
                if v == 0.0 {
                    0.5
                } else {
                    v
                }
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}
