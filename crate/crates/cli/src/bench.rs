//! `cadm bench`: median latency over the {dense (DC), sparse (SC)} x
//! {unfused, fused} x {default, tuned} grid, with every variant gated for
//! correctness against the dense-unfused-default baseline before it may be
//! reported.

use std::path::Path;
use std::time::Instant;

use cadm_core::autotune::{graph_shape_keys, tune_layer, TuneCache, TunerOptions};
use cadm_core::compress::project_sparsity;
use cadm_core::engine::{execute_graph, ExecOptions};
use cadm_core::fusion::run_fusion_pipeline;
use cadm_core::graph::{Graph, LayerKind, Weights};
use cadm_core::sparse::{csr_from_dense, csr_to_dense};
use cadm_core::tensor::{Layout, Tensor};
use cadm_core::test_util::max_rel_err;
use cadm_core::Result;

use crate::util::graph_input_dims;

const GATE_TOLERANCE: f32 = 1e-4;

pub fn run(
    g: &Graph,
    runs: usize,
    threads: usize,
    tune_cache: Option<&Path>,
    sparsify: f64,
    budget: usize,
    seed: u64,
) -> Result<()> {
    let dense = densified(g)?;
    let sparse = sparsified(g, sparsify)?;
    let (dense_fused, _) = run_fusion_pipeline(&dense)?;
    let (sparse_fused, _) = run_fusion_pipeline(&sparse)?;

    let mut cache = match tune_cache {
        Some(p) if p.exists() => TuneCache::load(p)?,
        _ => TuneCache::default(),
    };
    let opts = TunerOptions::default();
    for graph in [&dense, &sparse, &dense_fused, &sparse_fused] {
        for key in graph_shape_keys(graph)? {
            tune_layer(&key, budget, &mut cache, &opts)?;
        }
    }
    if let Some(p) = tune_cache {
        cache.save(p)?;
    }

    let dims = graph_input_dims(&dense)?;
    let input = seeded_input(&dims, seed);
    let exec = ExecOptions { workers: threads, profile: false };

    // Each variant is gated against the dense-unfused-default execution of
    // the same weight set: pruning for the SC rows changes the model, so the
    // gate checks kernel and fusion correctness, not pruning fidelity.
    let dense_of_sparse = densified(&sparse)?;
    let baseline_dc = execute_graph(&dense, &input, None, &exec)?;
    let baseline_sc = execute_graph(&dense_of_sparse, &input, None, &exec)?;

    let variants: [(&str, &Graph, Option<&TuneCache>, &Tensor); 8] = [
        ("DC-unfused-default", &dense, None, &baseline_dc),
        ("DC-unfused-tuned", &dense, Some(&cache), &baseline_dc),
        ("DC-fused-default", &dense_fused, None, &baseline_dc),
        ("DC-fused-tuned", &dense_fused, Some(&cache), &baseline_dc),
        ("SC-unfused-default", &sparse, None, &baseline_sc),
        ("SC-unfused-tuned", &sparse, Some(&cache), &baseline_sc),
        ("SC-fused-default", &sparse_fused, None, &baseline_sc),
        ("SC-fused-tuned", &sparse_fused, Some(&cache), &baseline_sc),
    ];

    let mut rows: Vec<(&str, f64)> = Vec::new();
    for (label, graph, c, baseline) in variants {
        // warmup run doubles as the correctness gate input
        let out = execute_graph(graph, &input, c, &exec)?;
        let err = max_rel_err(&baseline.data, &out.data);
        if err > GATE_TOLERANCE {
            eprintln!("{}: failed correctness gate ({:.2e} > {:.0e}), not reported", label, err, GATE_TOLERANCE);
            continue;
        }
        let mut samples = Vec::with_capacity(runs);
        for _ in 0..runs {
            let t0 = Instant::now();
            let out = execute_graph(graph, &input, c, &exec)?;
            samples.push(t0.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(out);
        }
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.push((label, samples[(runs - 1) / 2]));
    }

    let base_ms = rows
        .iter()
        .find(|(l, _)| *l == "DC-unfused-default")
        .map(|(_, t)| *t)
        .unwrap_or(f64::NAN);
    println!("variant\tmedian_ms\tspeedup");
    for (label, ms) in &rows {
        println!("{}\t{:.3}\t{:.2}", label, ms, base_ms / ms);
    }
    Ok(())
}

fn seeded_input(dims: &[usize], seed: u64) -> Tensor {
    let n: usize = dims.iter().product();
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let data = (0..n)
        .map(|_| {
            // xorshift64*, mapped into [-0.5, 0.5)
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            ((state >> 40) as f32 / (1u64 << 24) as f32) - 0.5
        })
        .collect();
    Tensor::new(dims.to_vec(), Layout::Nchw, data).unwrap()
}

/// Copy of the graph with every sparse weight densified.
fn densified(g: &Graph) -> Result<Graph> {
    let mut out = g.clone();
    for node in &mut out.nodes {
        if let Weights::Sparse(s) = &node.weights {
            let t = csr_to_dense(s)?;
            let dense = match &node.kind {
                LayerKind::Conv2d(a) | LayerKind::FusedConvBnAct { attrs: a, .. } => Tensor::new(
                    vec![a.out_ch, a.in_ch, a.kh, a.kw],
                    Layout::Nchw,
                    t.data,
                )?,
                _ => t,
            };
            node.weights = Weights::Dense(dense);
        }
    }
    Ok(out)
}

/// Copy of the graph with dense conv/FC/gemm weights magnitude-pruned to the
/// retained fraction and stored CSR. Already-sparse weights pass through;
/// depthwise convs stay dense (the engine has no sparse depthwise kernel).
fn sparsified(g: &Graph, keep_fraction: f64) -> Result<Graph> {
    let mut out = g.clone();
    for node in &mut out.nodes {
        let (rows, cols) = match &node.kind {
            LayerKind::Conv2d(a)
            | LayerKind::FusedConvBnAct { attrs: a, depthwise: false, .. } => {
                (a.out_ch, a.in_ch * a.kh * a.kw)
            }
            LayerKind::FullyConnected { in_dim, out_dim } => (*out_dim, *in_dim),
            LayerKind::Gemm { out_rows, inner } => (*out_rows, *inner),
            _ => continue,
        };
        if let Weights::Dense(t) = &node.weights {
            let retain = ((t.data.len() as f64 * keep_fraction).round() as usize)
                .clamp(1, t.data.len());
            let pruned = project_sparsity(&t.data, retain)?;
            let m = Tensor::matrix(rows, cols, pruned)?;
            node.weights = Weights::Sparse(csr_from_dense(&m)?);
        }
    }
    Ok(out)
}
