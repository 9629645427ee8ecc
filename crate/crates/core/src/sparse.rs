//! Compressed sparse row weight matrices, optionally tile-packed so each
//! nonzero is loaded once per output tile.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reordering of stored nonzeros into (row-tile, col-tile) groups.
///
/// `order[p]` is the index into `values`/`col_idx` of the p-th element in
/// packed iteration order. `group_ptr` (derived, length n_groups+1) marks the
/// group boundaries inside `order`; groups are laid out row-tile major.
#[derive(Clone, Debug, PartialEq)]
pub struct TilePacking {
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub order: Vec<u32>,
    pub group_ptr: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrixCsr {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
    pub col_idx: Vec<u32>,
    pub row_ptr: Vec<u32>,
    pub pack: Option<TilePacking>,
}

impl SparseMatrixCsr {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Fraction of zero entries.
    pub fn sparsity(&self) -> f64 {
        let total = self.rows * self.cols;
        if total == 0 {
            return 0.0;
        }
        1.0 - self.nnz() as f64 / total as f64
    }

    /// Check every CSR structural invariant.
    pub fn validate(&self) -> Result<()> {
        if self.row_ptr.len() != self.rows + 1 {
            return Err(Error::Format(format!(
                "row_ptr length {} != rows+1 ({})",
                self.row_ptr.len(),
                self.rows + 1
            )));
        }
        if self.row_ptr[0] != 0 {
            return Err(Error::Format("row_ptr[0] != 0".into()));
        }
        if self.row_ptr[self.rows] as usize != self.values.len()
            || self.values.len() != self.col_idx.len()
        {
            return Err(Error::Format("row_ptr end / values / col_idx lengths disagree".into()));
        }
        for r in 0..self.rows {
            let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
            if lo > hi {
                return Err(Error::Format(format!("row_ptr decreases at row {}", r)));
            }
            let mut prev: Option<u32> = None;
            for p in lo..hi {
                let c = self.col_idx[p as usize];
                if c as usize >= self.cols {
                    return Err(Error::Format(format!("col_idx {} out of range at row {}", c, r)));
                }
                if let Some(pc) = prev {
                    if c <= pc {
                        return Err(Error::Format(format!(
                            "col_idx not strictly increasing in row {}",
                            r
                        )));
                    }
                }
                prev = Some(c);
            }
        }
        if self.values.iter().any(|&v| v == 0.0) {
            return Err(Error::Format("stored value equals exactly zero".into()));
        }
        Ok(())
    }

    /// Row index of each stored nonzero, in storage order.
    pub fn row_of_each(&self) -> Vec<u32> {
        let mut out = vec![0u32; self.nnz()];
        for r in 0..self.rows {
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[p as usize] = r as u32;
            }
        }
        out
    }
}

/// Build CSR from a row-major dense matrix, dropping exact zeros.
pub fn csr_from_dense(m: &Tensor) -> Result<SparseMatrixCsr> {
    m.require_2d()?;
    let (rows, cols) = (m.dims[0], m.dims[1]);
    let mut values = Vec::new();
    let mut col_idx = Vec::new();
    let mut row_ptr = Vec::with_capacity(rows + 1);
    row_ptr.push(0u32);
    for r in 0..rows {
        for c in 0..cols {
            let v = m.at2(r, c);
            if v != 0.0 {
                values.push(v);
                col_idx.push(c as u32);
            }
        }
        row_ptr.push(values.len() as u32);
    }
    Ok(SparseMatrixCsr { rows, cols, values, col_idx, row_ptr, pack: None })
}

/// Expand CSR back to a dense row-major matrix.
pub fn csr_to_dense(s: &SparseMatrixCsr) -> Result<Tensor> {
    s.validate()?;
    let mut data = vec![0.0f32; s.rows * s.cols];
    for r in 0..s.rows {
        for p in s.row_ptr[r]..s.row_ptr[r + 1] {
            data[r * s.cols + s.col_idx[p as usize] as usize] = s.values[p as usize];
        }
    }
    Tensor::matrix(s.rows, s.cols, data)
}
