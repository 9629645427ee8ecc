//! Optimization-parameter selection: enumerate tile/unroll/loop-order
//! candidates per layer shape, prune the sub-optimal ones, measure the rest,
//! and cache the winners.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::engine::{gemm_naive, gemm_tiled, spmm_csr_tiled, KernelConfig, LoopOrder};
use crate::error::{Error, Result};
use crate::sparse::{csr_to_dense, SparseMatrixCsr};
use crate::tensor::Tensor;
use crate::test_util::max_rel_err;

/// 128 KiB of f32 elements, a typical mobile L1+L2 slice.
pub const DEFAULT_CACHE_BUDGET: usize = 32768;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelId {
    GemmDense,
    SpmmCsr,
}

/// Cache key: kernel kind, GEMM extents, and a coarse sparsity bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ShapeKey {
    pub kind: KernelId,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub sparsity_bucket: u8,
}

/// Buckets: 0 for dense, then (0,0.5], (0.5,0.8], (0.8,1).
pub fn bucket_of(sparsity: f64) -> u8 {
    if sparsity <= 0.0 {
        0
    } else if sparsity <= 0.5 {
        1
    } else if sparsity <= 0.8 {
        2
    } else {
        3
    }
}

/// Representative sparsity used to synthesize operands for a bucket.
fn bucket_sparsity(bucket: u8) -> f64 {
    match bucket {
        0 => 0.0,
        1 => 0.3,
        2 => 0.65,
        _ => 0.9,
    }
}

/// Kernel shapes a graph dispatches during execution, deduplicated in
/// schedule order. Priming the cache with exactly these keys makes every
/// executor lookup a hit.
pub fn graph_shape_keys(g: &crate::graph::Graph) -> Result<Vec<ShapeKey>> {
    use crate::graph::{LayerKind, Weights};
    use crate::tensor::conv_out_extent;

    let shapes = crate::graph::infer_shapes(g)?;
    let order = crate::graph::topological_order(g)?;
    let mut keys = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut push = |keys: &mut Vec<ShapeKey>, key: ShapeKey| {
        if seen.insert(key) {
            keys.push(key);
        }
    };
    for id in order {
        let node = g.node(id).unwrap();
        let preds = g.preds(id);
        let input = preds.first().map(|p| shapes[p].clone());
        let key = match &node.kind {
            LayerKind::Conv2d(a)
            | LayerKind::FusedConvBnAct { attrs: a, depthwise: false, .. } => {
                let s = input.ok_or(Error::Cycle)?;
                let ho = conv_out_extent(s[2], a.kh, a.stride, a.padding)
                    .ok_or_else(|| Error::Shape("kernel larger than padded input".into()))?;
                let wo = conv_out_extent(s[3], a.kw, a.stride, a.padding)
                    .ok_or_else(|| Error::Shape("kernel larger than padded input".into()))?;
                match &node.weights {
                    Weights::Dense(_) => Some(ShapeKey {
                        kind: KernelId::GemmDense,
                        m: a.out_ch,
                        n: ho * wo,
                        k: a.in_ch * a.kh * a.kw,
                        sparsity_bucket: 0,
                    }),
                    Weights::Sparse(sp) => Some(ShapeKey {
                        kind: KernelId::SpmmCsr,
                        m: sp.rows,
                        n: ho * wo,
                        k: sp.cols,
                        sparsity_bucket: bucket_of(sp.sparsity()),
                    }),
                    Weights::None => None,
                }
            }
            LayerKind::FullyConnected { in_dim, out_dim } => {
                let batch = input.map(|s| s[0]).unwrap_or(1);
                match &node.weights {
                    Weights::Dense(_) => Some(ShapeKey {
                        kind: KernelId::GemmDense,
                        m: *out_dim,
                        n: batch,
                        k: *in_dim,
                        sparsity_bucket: 0,
                    }),
                    Weights::Sparse(sp) => Some(ShapeKey {
                        kind: KernelId::SpmmCsr,
                        m: sp.rows,
                        n: batch,
                        k: sp.cols,
                        sparsity_bucket: bucket_of(sp.sparsity()),
                    }),
                    Weights::None => None,
                }
            }
            LayerKind::Gemm { out_rows, inner } => {
                let s = input.ok_or(Error::Cycle)?;
                let hw = s[2] * s[3];
                match &node.weights {
                    Weights::Dense(_) => Some(ShapeKey {
                        kind: KernelId::GemmDense,
                        m: *out_rows,
                        n: hw,
                        k: *inner,
                        sparsity_bucket: 0,
                    }),
                    Weights::Sparse(sp) => Some(ShapeKey {
                        kind: KernelId::SpmmCsr,
                        m: sp.rows,
                        n: hw,
                        k: sp.cols,
                        sparsity_bucket: bucket_of(sp.sparsity()),
                    }),
                    Weights::None => None,
                }
            }
            _ => None,
        };
        if let Some(k) = key {
            push(&mut keys, k);
        }
    }
    Ok(keys)
}

#[derive(Clone, Debug)]
pub struct SearchSpace {
    pub tile_m: Vec<usize>,
    pub tile_n: Vec<usize>,
    pub tile_k: Vec<usize>,
    pub unroll: Vec<usize>,
    pub loop_orders: Vec<LoopOrder>,
    /// Materialized candidate set; enumeration fills the full cross product,
    /// pruning filters it (coupled rules cannot stay a product set).
    pub candidates: Vec<KernelConfig>,
}

fn pow2_candidates(dim: usize) -> Vec<usize> {
    if dim < 4 {
        return vec![dim.max(1)];
    }
    let mut v = Vec::new();
    let mut p = 4usize;
    while p <= dim {
        v.push(p);
        p *= 2;
    }
    v
}

/// Candidates: powers of two in [4, dim] per tile axis (clamped to {dim} for
/// tiny extents), unroll in {1,2,4,8}, all six loop orders.
pub fn enumerate_search_space(key: &ShapeKey) -> SearchSpace {
    let tile_m = pow2_candidates(key.m);
    let tile_n = pow2_candidates(key.n);
    let tile_k = pow2_candidates(key.k);
    let unroll = vec![1, 2, 4, 8];
    let loop_orders = LoopOrder::ALL.to_vec();
    let mut candidates = Vec::new();
    for &tm in &tile_m {
        for &tn in &tile_n {
            for &tk in &tile_k {
                for &u in &unroll {
                    for &o in &loop_orders {
                        candidates.push(KernelConfig {
                            tile_m: tm,
                            tile_n: tn,
                            tile_k: tk,
                            unroll: u,
                            loop_order: o,
                            vector_width_hint: 4,
                        });
                    }
                }
            }
        }
    }
    SearchSpace { tile_m, tile_n, tile_k, unroll, loop_orders, candidates }
}

/// Drop configs whose tiles exceed the dims, whose unroll exceeds tile_k, or
/// whose tile footprint exceeds the cache budget; at sparsity >= 0.8 only the
/// two m-outermost loop orders survive. Falls back to the default config
/// rather than emptying the space.
pub fn prune_search_space(
    s: &SearchSpace,
    key: &ShapeKey,
    sparsity: f64,
    cache_budget: usize,
) -> SearchSpace {
    let mut out = s.clone();
    out.candidates.retain(|c| {
        if c.tile_m > key.m.max(1) || c.tile_n > key.n.max(1) || c.tile_k > key.k.max(1) {
            return false;
        }
        if c.unroll > c.tile_k {
            return false;
        }
        if c.footprint() > cache_budget {
            return false;
        }
        if sparsity >= 0.8 && !LoopOrder::M_OUTERMOST.contains(&c.loop_order) {
            return false;
        }
        true
    });
    if out.candidates.is_empty() {
        out.candidates.push(KernelConfig::default());
    }
    out
}

/// Deterministic trial order: ascending footprint, then field-lexicographic.
pub fn ordered_candidates(s: &SearchSpace) -> Vec<KernelConfig> {
    let mut v = s.candidates.clone();
    v.sort_by_key(|c| {
        (c.footprint(), c.tile_m, c.tile_n, c.tile_k, c.unroll, c.loop_order)
    });
    v.dedup();
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneEntry {
    pub config: KernelConfig,
    pub micros: f64,
    pub trials: u32,
}

#[derive(Clone, Debug, Default)]
pub struct TuneCache {
    entries: HashMap<ShapeKey, TuneEntry>,
}

// JSON schema: array of {key, config, micros, trials} records.
#[derive(Serialize, Deserialize)]
struct KeyRecord {
    kind: KernelId,
    m: usize,
    n: usize,
    k: usize,
    sparsity_bucket: u8,
}

#[derive(Serialize, Deserialize)]
struct ConfigRecord {
    tile_m: usize,
    tile_n: usize,
    tile_k: usize,
    unroll: usize,
    loop_order: String,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    key: KeyRecord,
    config: ConfigRecord,
    micros: f64,
    trials: u32,
}

impl TuneCache {
    pub fn get(&self, key: &ShapeKey) -> Option<&TuneEntry> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Record a measurement; an entry's time never increases.
    pub fn record(&mut self, key: ShapeKey, config: KernelConfig, micros: f64, trials: u32) {
        match self.entries.get_mut(&key) {
            Some(e) => {
                e.trials += trials;
                if micros < e.micros {
                    e.micros = micros;
                    e.config = config;
                }
            }
            None => {
                self.entries.insert(key, TuneEntry { config, micros, trials });
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut records: Vec<CacheRecord> = self
            .entries
            .iter()
            .map(|(k, e)| CacheRecord {
                key: KeyRecord {
                    kind: k.kind,
                    m: k.m,
                    n: k.n,
                    k: k.k,
                    sparsity_bucket: k.sparsity_bucket,
                },
                config: ConfigRecord {
                    tile_m: e.config.tile_m,
                    tile_n: e.config.tile_n,
                    tile_k: e.config.tile_k,
                    unroll: e.config.unroll,
                    loop_order: e.config.loop_order.as_str().to_string(),
                },
                micros: e.micros,
                trials: e.trials,
            })
            .collect();
        records.sort_by_key(|r| (r.key.m, r.key.n, r.key.k, r.key.sparsity_bucket));
        let json = serde_json::to_string_pretty(&records)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let records: Vec<CacheRecord> = serde_json::from_str(&text)?;
        let mut cache = TuneCache::default();
        for r in records {
            let key = ShapeKey {
                kind: r.key.kind,
                m: r.key.m,
                n: r.key.n,
                k: r.key.k,
                sparsity_bucket: r.key.sparsity_bucket,
            };
            let config = KernelConfig {
                tile_m: r.config.tile_m,
                tile_n: r.config.tile_n,
                tile_k: r.config.tile_k,
                unroll: r.config.unroll,
                loop_order: LoopOrder::parse(&r.config.loop_order)?,
                vector_width_hint: 4,
            };
            cache.entries.insert(key, TuneEntry { config, micros: r.micros, trials: r.trials });
        }
        Ok(cache)
    }
}

/// Deterministic synthetic operands for a shape key. Values are scaled by
/// 1/sqrt(k) so dot products stay O(1) and f32 accumulation-order drift
/// between configs stays inside the 1e-5 correctness gate at any k.
pub fn synthesize_operands(key: &ShapeKey) -> (Option<SparseMatrixCsr>, Tensor, Tensor) {
    let mut rng = StdRng::seed_from_u64(
        0xC0FFEE ^ (key.m as u64) << 32 ^ (key.n as u64) << 16 ^ key.k as u64,
    );
    let scale = 1.0 / (key.k as f32).sqrt();
    let b_data: Vec<f32> =
        (0..key.k * key.n).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect();
    let b = Tensor::matrix(key.k, key.n, b_data).unwrap();
    match key.kind {
        KernelId::GemmDense => {
            let a_data: Vec<f32> =
                (0..key.m * key.k).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let a = Tensor::matrix(key.m, key.k, a_data).unwrap();
            (None, a, b)
        }
        KernelId::SpmmCsr => {
            let sp = bucket_sparsity(key.sparsity_bucket);
            let a_data: Vec<f32> = (0..key.m * key.k)
                .map(|_| {
                    if rng.random_bool(sp) {
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
            let a = Tensor::matrix(key.m, key.k, a_data).unwrap();
            let csr = crate::sparse::csr_from_dense(&a).unwrap();
            (Some(csr), a, b)
        }
    }
}

fn run_kernel(
    key: &ShapeKey,
    csr: Option<&SparseMatrixCsr>,
    a: &Tensor,
    b: &Tensor,
    cfg: &KernelConfig,
) -> Result<Tensor> {
    match key.kind {
        KernelId::GemmDense => gemm_tiled(a, b, cfg),
        KernelId::SpmmCsr => {
            let w = csr.ok_or_else(|| Error::Parameter("missing sparse operand".into()))?;
            spmm_csr_tiled(w, b, cfg)
        }
    }
}

/// Median of `repeats` timed runs (one warmup excluded), in microseconds.
/// The config's output is validated against the naive oracle before any
/// timing is recorded.
pub fn measure_config(key: &ShapeKey, cfg: &KernelConfig, repeats: usize) -> Result<f64> {
    if repeats < 3 {
        return Err(Error::Parameter("repeats must be >= 3".into()));
    }
    let (csr, a, b) = synthesize_operands(key);
    // correctness gate
    let got = run_kernel(key, csr.as_ref(), &a, &b, cfg)?;
    let reference = match key.kind {
        KernelId::GemmDense => gemm_naive(&a, &b)?,
        KernelId::SpmmCsr => gemm_naive(&csr_to_dense(csr.as_ref().unwrap())?, &b)?,
    };
    if max_rel_err(&got.data, &reference.data) > 1e-5 {
        return Err(Error::Execution {
            node: 0,
            msg: format!("config {:?} failed the correctness gate", cfg),
        });
    }
    // warmup
    let _ = run_kernel(key, csr.as_ref(), &a, &b, cfg)?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = run_kernel(key, csr.as_ref(), &a, &b, cfg)?;
        samples.push(start.elapsed().as_secs_f64() * 1e6);
        std::hint::black_box(out);
    }
    samples.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(samples[(repeats - 1) / 2])
}

#[derive(Clone, Copy, Debug)]
pub struct TunerOptions {
    pub repeats: usize,
    pub cache_budget: usize,
}

impl Default for TunerOptions {
    fn default() -> Self {
        Self { repeats: 3, cache_budget: DEFAULT_CACHE_BUDGET }
    }
}

/// Evaluate up to `budget` pruned candidates and return the fastest config;
/// a cache hit short-circuits without measuring.
pub fn tune_layer(
    key: &ShapeKey,
    budget: usize,
    cache: &mut TuneCache,
    opts: &TunerOptions,
) -> Result<KernelConfig> {
    if budget == 0 {
        return Err(Error::Parameter("tuning budget must be >= 1".into()));
    }
    if let Some(e) = cache.get(key) {
        return Ok(e.config);
    }
    let sparsity = bucket_sparsity(key.sparsity_bucket);
    let space = enumerate_search_space(key);
    let pruned = prune_search_space(&space, key, sparsity, opts.cache_budget);
    let trials = ordered_candidates(&pruned);
    let mut best: Option<(KernelConfig, f64)> = None;
    let mut tried = 0u32;
    // the default config is always measured so tuning never regresses it
    let default_first = std::iter::once(KernelConfig::default())
        .chain(trials.into_iter().filter(|c| *c != KernelConfig::default()).take(budget));
    for cfg in default_first {
        match measure_config(key, &cfg, opts.repeats) {
            Ok(micros) => {
                tried += 1;
                if best.map_or(true, |(_, b)| micros < b) {
                    best = Some((cfg, micros));
                }
            }
            Err(_) => continue,
        }
    }
    match best {
        Some((cfg, micros)) => {
            cache.record(*key, cfg, micros, tried);
            Ok(cfg)
        }
        None => Ok(KernelConfig::default()),
    }
}
