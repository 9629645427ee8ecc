//! Tiled CSR sparse-times-dense kernels and tile packing.
//!
//! Per output element the accumulation order is always k ascending, both for
//! the plain row-tiled kernel and the packed one, so packing changes memory
//! traffic but never the numerics.

use crate::engine::config::{CountLoads, KernelConfig, LoadCounter, NoCount};
use crate::error::{Error, Result};
use crate::sparse::{SparseMatrixCsr, TilePacking};
use crate::tensor::Tensor;

/// c = w · x with w in CSR form; equals the dense product of `csr_to_dense(w)`.
pub fn spmm_csr_tiled(w: &SparseMatrixCsr, x: &Tensor, cfg: &KernelConfig) -> Result<Tensor> {
    spmm_impl(w, x, cfg, &mut NoCount, 1)
}

pub fn spmm_csr_tiled_mt(
    w: &SparseMatrixCsr,
    x: &Tensor,
    cfg: &KernelConfig,
    workers: usize,
) -> Result<Tensor> {
    spmm_impl(w, x, cfg, &mut NoCount, workers)
}

/// Instrumented variant; `counter.weight_loads` tallies one event per fetch of
/// a stored nonzero.
pub fn spmm_csr_tiled_counted(
    w: &SparseMatrixCsr,
    x: &Tensor,
    cfg: &KernelConfig,
    counter: &mut LoadCounter,
) -> Result<Tensor> {
    spmm_impl(w, x, cfg, counter, 1)
}

fn spmm_impl<C: CountLoads>(
    w: &SparseMatrixCsr,
    x: &Tensor,
    cfg: &KernelConfig,
    counter: &mut C,
    workers: usize,
) -> Result<Tensor> {
    x.require_2d()?;
    cfg.validate()?;
    let (k, n) = (x.dims[0], x.dims[1]);
    if w.cols != k {
        return Err(Error::Shape(format!("spmm inner dims disagree: {} vs {}", w.cols, k)));
    }
    let m = w.rows;
    let mut c = vec![0.0f32; m * n];
    match &w.pack {
        Some(pack) => spmm_packed(w, pack, &x.data, &mut c, n, cfg, counter),
        None => {
            if workers <= 1 || m < 2 * cfg.tile_m {
                spmm_rows(w, &x.data, &mut c, 0, m, n, cfg, counter);
            } else {
                spmm_rows_parallel(w, &x.data, &mut c, m, n, cfg, workers);
            }
        }
    }
    Tensor::matrix(m, n, c)
}

#[allow(clippy::too_many_arguments)]
fn spmm_rows<C: CountLoads>(
    w: &SparseMatrixCsr,
    x: &[f32],
    c: &mut [f32],
    m0: usize,
    m1: usize,
    n: usize,
    cfg: &KernelConfig,
    counter: &mut C,
) {
    let (tm, tn) = (cfg.tile_m, cfg.tile_n);
    let mut r0 = m0;
    while r0 < m1 {
        let r1 = (r0 + tm).min(m1);
        let mut j0 = 0;
        while j0 < n {
            let j1 = (j0 + tn).min(n);
            for i in r0..r1 {
                let crow = &mut c[(i - m0) * n + j0..(i - m0) * n + j1];
                for p in w.row_ptr[i] as usize..w.row_ptr[i + 1] as usize {
                    let v = w.values[p];
                    let kk = w.col_idx[p] as usize;
                    counter.weight(1);
                    let xrow = &x[kk * n + j0..kk * n + j1];
                    for (j, cv) in crow.iter_mut().enumerate() {
                        *cv += v * xrow[j];
                    }
                }
            }
            j0 = j1;
        }
        r0 = r1;
    }
}

fn spmm_rows_parallel(
    w: &SparseMatrixCsr,
    x: &[f32],
    c: &mut [f32],
    m: usize,
    n: usize,
    cfg: &KernelConfig,
    workers: usize,
) {
    let tiles = m.div_ceil(cfg.tile_m);
    let per = tiles.div_ceil(workers) * cfg.tile_m;
    std::thread::scope(|s| {
        let mut rest: &mut [f32] = c;
        let mut row0 = 0usize;
        while row0 < m {
            let rows = per.min(m - row0);
            let (band, tail) = rest.split_at_mut(rows * n);
            rest = tail;
            let start = row0;
            s.spawn(move || {
                spmm_rows(w, x, band, start, start + rows, n, cfg, &mut NoCount);
            });
            row0 += rows;
        }
    });
}

fn spmm_packed<C: CountLoads>(
    w: &SparseMatrixCsr,
    pack: &TilePacking,
    x: &[f32],
    c: &mut [f32],
    n: usize,
    cfg: &KernelConfig,
    counter: &mut C,
) {
    let rows_of = w.row_of_each();
    let tn = cfg.tile_n;
    let n_row_tiles = w.rows.div_ceil(pack.tile_rows);
    let n_col_tiles = w.cols.div_ceil(pack.tile_cols);
    for rt in 0..n_row_tiles {
        let mut j0 = 0;
        while j0 < n {
            let j1 = (j0 + tn).min(n);
            for kt in 0..n_col_tiles {
                let g = rt * n_col_tiles + kt;
                for p in pack.group_ptr[g] as usize..pack.group_ptr[g + 1] as usize {
                    let idx = pack.order[p] as usize;
                    let v = w.values[idx];
                    let kk = w.col_idx[idx] as usize;
                    let i = rows_of[idx] as usize;
                    counter.weight(1);
                    let xrow = &x[kk * n + j0..kk * n + j1];
                    let crow = &mut c[i * n + j0..i * n + j1];
                    for (j, cv) in crow.iter_mut().enumerate() {
                        *cv += v * xrow[j];
                    }
                }
            }
            j0 = j1;
        }
    }
}

/// Worst-case element-at-a-time reference: every stored nonzero is reloaded
/// for each output column, so `weight_loads == nnz * N`.
pub fn spmm_csr_elementwise_counted(
    w: &SparseMatrixCsr,
    x: &Tensor,
    counter: &mut LoadCounter,
) -> Result<Tensor> {
    x.require_2d()?;
    let (k, n) = (x.dims[0], x.dims[1]);
    if w.cols != k {
        return Err(Error::Shape(format!("spmm inner dims disagree: {} vs {}", w.cols, k)));
    }
    let mut c = vec![0.0f32; w.rows * n];
    for i in 0..w.rows {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in w.row_ptr[i] as usize..w.row_ptr[i + 1] as usize {
                counter.weight(1);
                acc += w.values[p] * x.data[w.col_idx[p] as usize * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    Tensor::matrix(w.rows, n, c)
}

/// Reorder stored nonzeros into (row-tile, col-tile) groups sized by
/// (cfg.tile_m, cfg.tile_k). Within a group, entries keep row-major then
/// column order, which preserves the per-row k-ascending accumulation order.
pub fn pack_weights_tiled(w: &SparseMatrixCsr, cfg: &KernelConfig) -> SparseMatrixCsr {
    let tile_rows = cfg.tile_m.max(1);
    let tile_cols = cfg.tile_k.max(1);
    let n_row_tiles = w.rows.div_ceil(tile_rows).max(1);
    let n_col_tiles = w.cols.div_ceil(tile_cols).max(1);
    let n_groups = n_row_tiles * n_col_tiles;
    let mut groups: Vec<Vec<u32>> = vec![Vec::new(); n_groups];
    for r in 0..w.rows {
        for p in w.row_ptr[r] as usize..w.row_ptr[r + 1] as usize {
            let kt = w.col_idx[p] as usize / tile_cols;
            let rt = r / tile_rows;
            groups[rt * n_col_tiles + kt].push(p as u32);
        }
    }
    let mut order = Vec::with_capacity(w.nnz());
    let mut group_ptr = Vec::with_capacity(n_groups + 1);
    group_ptr.push(0u32);
    for g in groups {
        order.extend_from_slice(&g);
        group_ptr.push(order.len() as u32);
    }
    let mut out = w.clone();
    out.pack = Some(TilePacking { tile_rows, tile_cols, order, group_ptr });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::gemm::gemm_naive;
    use crate::sparse::{csr_from_dense, csr_to_dense};
    use crate::test_util::{max_rel_err, random_matrix, random_sparse_matrix};

    #[test]
    fn sparse_identity() {
        let mut id = vec![0.0f32; 9];
        for i in 0..3 {
            id[i * 3 + i] = 1.0;
        }
        let w = csr_from_dense(&Tensor::matrix(3, 3, id).unwrap()).unwrap();
        let x = random_matrix(3, 4, 9);
        let c = spmm_csr_tiled(&w, &x, &KernelConfig::default()).unwrap();
        assert_eq!(c.data, x.data);
    }

    #[test]
    fn single_nonzero() {
        let mut d = vec![0.0f32; 3 * 4];
        d[1 * 4 + 2] = 3.0;
        let w = csr_from_dense(&Tensor::matrix(3, 4, d).unwrap()).unwrap();
        let x = Tensor::matrix(4, 2, vec![1.0; 8]).unwrap();
        let c = spmm_csr_tiled(&w, &x, &KernelConfig::default()).unwrap();
        assert_eq!(c.data, vec![0.0, 0.0, 3.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn sparse_matches_dense_oracle() {
        let w = random_sparse_matrix(60, 45, 0.9, 11);
        let x = random_matrix(45, 33, 12);
        let dense = csr_to_dense(&w).unwrap();
        let oracle = gemm_naive(&dense, &x).unwrap();
        let c = spmm_csr_tiled(&w, &x, &KernelConfig::default()).unwrap();
        assert!(max_rel_err(&c.data, &oracle.data) <= 1e-5);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let w = random_sparse_matrix(4, 4, 0.5, 1);
        let x = random_matrix(5, 3, 2);
        assert!(spmm_csr_tiled(&w, &x, &KernelConfig::default()).is_err());
    }

    #[test]
    fn pack_whole_matrix_is_identity_permutation() {
        let w = random_sparse_matrix(6, 6, 0.5, 3);
        let cfg = KernelConfig { tile_m: 8, tile_k: 8, ..KernelConfig::default() };
        let packed = pack_weights_tiled(&w, &cfg);
        let pack = packed.pack.unwrap();
        let expect: Vec<u32> = (0..w.nnz() as u32).collect();
        assert_eq!(pack.order, expect);
    }

    #[test]
    fn pack_is_bijection() {
        let w = random_sparse_matrix(4, 4, 0.4, 5);
        let cfg = KernelConfig { tile_m: 2, tile_k: 2, ..KernelConfig::default() };
        let packed = pack_weights_tiled(&w, &cfg);
        let pack = packed.pack.unwrap();
        let mut seen = vec![false; w.nnz()];
        for &idx in &pack.order {
            assert!(!seen[idx as usize], "duplicate index in packing");
            seen[idx as usize] = true;
        }
        assert!(seen.iter().all(|&s| s), "packing must cover every nonzero");
    }

    #[test]
    fn packed_bit_identical_to_unpacked() {
        let w = random_sparse_matrix(50, 64, 0.8, 21);
        let x = random_matrix(64, 37, 22);
        let cfg = KernelConfig { tile_m: 16, tile_n: 8, tile_k: 16, ..KernelConfig::default() };
        let plain = spmm_csr_tiled(&w, &x, &cfg).unwrap();
        let packed_w = pack_weights_tiled(&w, &cfg);
        let packed = spmm_csr_tiled(&packed_w, &x, &cfg).unwrap();
        assert_eq!(plain.data, packed.data);
    }

    #[test]
    fn packed_weight_loads_bound() {
        let w = random_sparse_matrix(32, 32, 0.9, 31);
        let x = random_matrix(32, 48, 32);
        let cfg = KernelConfig { tile_m: 8, tile_n: 16, tile_k: 8, ..KernelConfig::default() };
        let packed_w = pack_weights_tiled(&w, &cfg);
        let mut counter = LoadCounter::default();
        spmm_csr_tiled_counted(&packed_w, &x, &cfg, &mut counter).unwrap();
        let nnz = w.nnz() as u64;
        let n = 48u64;
        let col_tiles = n.div_ceil(cfg.tile_n as u64);
        assert!(counter.weight_loads <= nnz * col_tiles);

        let mut base = LoadCounter::default();
        spmm_csr_elementwise_counted(&w, &x, &mut base).unwrap();
        assert_eq!(base.weight_loads, nnz * n);
        assert!(counter.weight_loads < base.weight_loads);
    }

    #[test]
    fn worker_count_does_not_change_result() {
        let w = random_sparse_matrix(70, 40, 0.7, 41);
        let x = random_matrix(40, 25, 42);
        let cfg = KernelConfig::default();
        let one = spmm_csr_tiled_mt(&w, &x, &cfg, 1).unwrap();
        for workers in [2, 3] {
            let many = spmm_csr_tiled_mt(&w, &x, &cfg, workers).unwrap();
            assert_eq!(one.data, many.data);
        }
    }
}
