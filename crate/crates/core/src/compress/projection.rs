//! Euclidean projections onto the ADMM constraint sets: cardinality balls
//! (pruning) and discrete quantization grids. Both are deterministic with
//! explicitly pinned tie-breaking so results are reproducible bit for bit.

use crate::error::{Error, Result};

/// Project onto { w : nnz(w) <= k } by keeping the k largest magnitudes.
/// Ties in magnitude keep the entry with the lower flat index.
pub fn project_sparsity(w: &[f32], k: usize) -> Result<Vec<f32>> {
    if k == 0 || k > w.len() {
        return Err(Error::Parameter(format!("retain count {} outside 1..={}", k, w.len())));
    }
    if k == w.len() {
        return Ok(w.to_vec());
    }
    let mut idx: Vec<usize> = (0..w.len()).collect();
    // sort by descending |w|, then ascending index
    idx.sort_by(|&a, &b| {
        w[b].abs()
            .partial_cmp(&w[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0f32; w.len()];
    for &i in &idx[..k] {
        out[i] = w[i];
    }
    Ok(out)
}

/// Support mask of a projected vector: true where the entry survived.
pub fn support_mask(w: &[f32]) -> Vec<bool> {
    w.iter().map(|&v| v != 0.0).collect()
}

/// Symmetric uniform quantization grid for `bits`-bit weights. Zero is always
/// a level; scale maps the largest magnitude onto the extreme level.
pub fn quant_levels(w: &[f32], bits: u8) -> Result<Vec<f32>> {
    if bits < 2 || bits > 8 {
        return Err(Error::Parameter(format!("quantization bits {} outside 2..=8", bits)));
    }
    let qmax = (1i32 << (bits - 1)) - 1;
    let wmax = w.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    let scale = if wmax > 0.0 { wmax / qmax as f32 } else { 1.0 };
    Ok((-qmax..=qmax).map(|q| q as f32 * scale).collect())
}

/// Project each entry onto the nearest level of an ascending grid. Exact
/// midpoints round toward the smaller-magnitude level.
pub fn project_quantization(w: &[f32], levels: &[f32]) -> Result<Vec<f32>> {
    if levels.is_empty() {
        return Err(Error::Parameter("empty quantization grid".into()));
    }
    if levels.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::Parameter("quantization grid must be strictly ascending".into()));
    }
    Ok(w.iter().map(|&v| nearest_level(v, levels)).collect())
}

fn nearest_level(v: f32, levels: &[f32]) -> f32 {
    let mut best = levels[0];
    let mut best_d = (v - best).abs();
    for &l in &levels[1..] {
        let d = (v - l).abs();
        let better = d < best_d || (d == best_d && l.abs() < best.abs());
        if better {
            best = l;
            best_d = d;
        }
    }
    best
}
