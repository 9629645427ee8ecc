//! Tiled dense GEMM with configurable loop order and unrolling.
//!
//! The accumulation order for every output element is fully determined by the
//! config (tile traversal per `loop_order`, k ascending inside a tile), so
//! results are reproducible per config and identical for any worker count.

use crate::engine::config::KernelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// c[i,j] = sum_k a[i,k] * b[k,j].
pub fn gemm_tiled(a: &Tensor, b: &Tensor, cfg: &KernelConfig) -> Result<Tensor> {
    gemm_tiled_mt(a, b, cfg, 1)
}

pub fn gemm_tiled_mt(a: &Tensor, b: &Tensor, cfg: &KernelConfig, workers: usize) -> Result<Tensor> {
    a.require_2d()?;
    b.require_2d()?;
    cfg.validate()?;
    let (m, k) = (a.dims[0], a.dims[1]);
    let (kb, n) = (b.dims[0], b.dims[1]);
    if k != kb {
        return Err(Error::Shape(format!("gemm inner dims disagree: {} vs {}", k, kb)));
    }
    let mut c = vec![0.0f32; m * n];
    if workers <= 1 || m < 2 * cfg.tile_m {
        gemm_rows(&a.data, &b.data, &mut c, 0, m, k, n, cfg);
    } else {
        // Contiguous row bands aligned to tile_m; each worker owns a disjoint
        // output slice, so per-element accumulation order is unchanged.
        let tiles = m.div_ceil(cfg.tile_m);
        let per = tiles.div_ceil(workers) * cfg.tile_m;
        std::thread::scope(|s| {
            let mut rest: &mut [f32] = &mut c;
            let mut row0 = 0usize;
            while row0 < m {
                let rows = per.min(m - row0);
                let (band, tail) = rest.split_at_mut(rows * n);
                rest = tail;
                let (adata, bdata) = (&a.data, &b.data);
                let start = row0;
                s.spawn(move || {
                    let mut local = band;
                    gemm_rows_into(adata, bdata, &mut local, start, start + rows, k, n, cfg);
                });
                row0 += rows;
            }
        });
    }
    Tensor::matrix(m, n, c)
}

/// Serial path writing into the full output buffer.
fn gemm_rows(a: &[f32], b: &[f32], c: &mut [f32], m0: usize, m1: usize, k: usize, n: usize, cfg: &KernelConfig) {
    let band = &mut c[m0 * n..m1 * n];
    let mut band_ref: &mut [f32] = band;
    gemm_rows_into(a, b, &mut band_ref, m0, m1, k, n, cfg);
}

/// Compute rows [m0, m1) of the product into `c_band` (row m0 maps to band
/// row 0). Tile traversal follows cfg.loop_order.
fn gemm_rows_into(
    a: &[f32],
    b: &[f32],
    c_band: &mut &mut [f32],
    m0: usize,
    m1: usize,
    k: usize,
    n: usize,
    cfg: &KernelConfig,
) {
    let (tm, tn, tk) = (cfg.tile_m, cfg.tile_n, cfg.tile_k);
    let counts = [(m1 - m0).div_ceil(tm), n.div_ceil(tn), k.div_ceil(tk)];
    let axes = cfg.loop_order.axes();
    let mut t = [0usize; 3];
    for i0 in 0..counts[axes[0]] {
        t[axes[0]] = i0;
        for i1 in 0..counts[axes[1]] {
            t[axes[1]] = i1;
            for i2 in 0..counts[axes[2]] {
                t[axes[2]] = i2;
                let ra = m0 + t[0] * tm;
                let rb = (ra + tm).min(m1);
                let ja = t[1] * tn;
                let jb = (ja + tn).min(n);
                let ka = t[2] * tk;
                let kb = (ka + tk).min(k);
                micro_tile(a, b, c_band, m0, ra, rb, ja, jb, ka, kb, k, n, cfg.unroll);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn micro_tile(
    a: &[f32],
    b: &[f32],
    c_band: &mut &mut [f32],
    band_origin: usize,
    ra: usize,
    rb: usize,
    ja: usize,
    jb: usize,
    ka: usize,
    kb: usize,
    k: usize,
    n: usize,
    unroll: usize,
) {
    for i in ra..rb {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c_band[(i - band_origin) * n + ja..(i - band_origin) * n + jb];
        let mut kk = ka;
        while kk < kb {
            let ku = unroll.min(kb - kk);
            match ku {
                4 => {
                    let (a0, a1, a2, a3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
                    let b0 = &b[kk * n + ja..kk * n + jb];
                    let b1 = &b[(kk + 1) * n + ja..(kk + 1) * n + jb];
                    let b2 = &b[(kk + 2) * n + ja..(kk + 2) * n + jb];
                    let b3 = &b[(kk + 3) * n + ja..(kk + 3) * n + jb];
                    for (j, cv) in crow.iter_mut().enumerate() {
                        *cv += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                    }
                }
                2 => {
                    let (a0, a1) = (arow[kk], arow[kk + 1]);
                    let b0 = &b[kk * n + ja..kk * n + jb];
                    let b1 = &b[(kk + 1) * n + ja..(kk + 1) * n + jb];
                    for (j, cv) in crow.iter_mut().enumerate() {
                        *cv += a0 * b0[j] + a1 * b1[j];
                    }
                }
                1 => {
                    let a0 = arow[kk];
                    let b0 = &b[kk * n + ja..kk * n + jb];
                    for (j, cv) in crow.iter_mut().enumerate() {
                        *cv += a0 * b0[j];
                    }
                }
                _ => {
                    for (j, cv) in crow.iter_mut().enumerate() {
                        let mut acc = 0.0f32;
                        for l in 0..ku {
                            acc += arow[kk + l] * b[(kk + l) * n + ja + j];
                        }
                        *cv += acc;
                    }
                }
            }
            kk += ku;
        }
    }
}

/// Naive triple-loop reference used as the independent oracle in tests.
pub fn gemm_naive(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.require_2d()?;
    b.require_2d()?;
    let (m, k) = (a.dims[0], a.dims[1]);
    let (kb, n) = (b.dims[0], b.dims[1]);
    if k != kb {
        return Err(Error::Shape(format!("gemm inner dims disagree: {} vs {}", k, kb)));
    }
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += a.data[i * k + p] * b.data[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    Tensor::matrix(m, n, c)
}
