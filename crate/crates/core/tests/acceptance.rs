//! Acceptance suite: one printed PASS/FAIL line per criterion.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines as
//! they are produced; without --nocapture the harness shows them only for
//! failing criteria.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cadm_core::autotune::{
    bucket_of, enumerate_search_space, measure_config, prune_search_space, tune_layer, KernelId,
    ShapeKey, TuneCache, TunerOptions,
};
use cadm_core::compress::{
    accuracy, admm_compress, export_compressed, forward_backward, logits_for, masked_retrain,
    progressive_compress, project_quantization, project_sparsity, quant_levels, train_dense,
    AdmmSchedule, ConstraintSpec, HistoryEntry, PruneSpec, QuantSpec, SgdOptions, TrainLayer,
    TrainableNet,
};
use cadm_core::engine::{
    conv2d_direct, depthwise_conv2d, execute_graph, gemm_tiled, pool2d, spmm_csr_tiled,
    spmm_csr_tiled_counted, ExecOptions, KernelConfig, LoadCounter, LoopOrder,
};
use cadm_core::fusion::run_fusion_pipeline;
use cadm_core::graph::{ConvAttrs, Graph, LayerKind, PoolKind, Weights};
use cadm_core::mnist::{load_mnist_idx, Dataset};
use cadm_core::model::{load_model, save_model};
use cadm_core::reference::{build_reference_graph, mobilenet_v1, ReferenceModel};
use cadm_core::engine::{pack_weights_tiled, spmm_csr_elementwise_counted};
use cadm_core::sparse::csr_to_dense;
use cadm_core::tensor::{conv_out_extent, Layout, Tensor};
use cadm_core::test_util::{max_rel_err, random_matrix, random_sparse_matrix};

fn criterion(name: &str, pass: bool, detail: &str) {
    println!("{}: {} ({})", if pass { "PASS" } else { "FAIL" }, name, detail);
    assert!(pass, "{}: {}", name, detail);
}

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

// ---------------------------------------------------------------------------
// shared MNIST compression pipeline (trained once, used by several criteria)

struct Pipeline {
    baseline_acc: f32,
    pruned: TrainableNet,
    pruned_acc: f32,
    histories: Vec<Vec<HistoryEntry>>,
    final_spec: PruneSpec,
    train: Dataset,
    test: Dataset,
}

static PIPELINE: OnceLock<Pipeline> = OnceLock::new();

fn pipeline() -> &'static Pipeline {
    PIPELINE.get_or_init(|| {
        let dir = mnist_dir();
        let train = load_mnist_idx(
            &dir.join("train-images-idx3-ubyte"),
            &dir.join("train-labels-idx1-ubyte"),
        )
        .expect("MNIST training set under data/mnist");
        let test = load_mnist_idx(
            &dir.join("t10k-images-idx3-ubyte"),
            &dir.join("t10k-labels-idx1-ubyte"),
        )
        .expect("MNIST test set under data/mnist");

        let mut net = TrainableNet::lenet_300_100(42);
        let opts = SgdOptions { lr: 0.1, momentum: 0.9, batch: 64 };
        let baseline_acc = train_dense(&mut net, &train, &test, 10, &opts, 42).unwrap();

        // progressive pruning 4x -> 10x
        let stages = vec![
            PruneSpec::uniform(&net, 0.25).unwrap(),
            PruneSpec::uniform(&net, 0.10).unwrap(),
        ];
        let schedule = AdmmSchedule {
            rho0: 1e-3,
            rho_factor: 10.0,
            stages: 3,
            iters_per_stage: 1,
            epochs: 3,
            sgd: SgdOptions { lr: 0.05, momentum: 0.9, batch: 64 },
            seed: 42,
        };
        let histories =
            progressive_compress(&mut net, &stages, &train, &schedule, 4, None).unwrap();
        let pruned_acc = accuracy(&net, &test).unwrap();
        let final_spec = stages.last().unwrap().clone();

        Pipeline { baseline_acc, pruned: net, pruned_acc, histories, final_spec, train, test }
    })
}

// ---------------------------------------------------------------------------
// independent oracles, written against the math rather than the kernels

fn naive_gemm(a: &Tensor, b: &Tensor) -> Vec<f32> {
    let (m, k) = (a.dims[0], a.dims[1]);
    let n = b.dims[1];
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
    c
}

/// Convolution by materializing the zero-padded input first, a deliberately
/// different structure from the bounds-checked production kernel.
fn naive_conv(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
    depthwise: bool,
) -> Vec<f32> {
    let (n, c, h, wd) = (x.dims[0], x.dims[1], x.dims[2], x.dims[3]);
    let (kh, kw) = (w.dims[2], w.dims[3]);
    let kout = if depthwise { c } else { w.dims[0] };
    let (hp, wp) = (h + 2 * padding, wd + 2 * padding);
    let mut padded = vec![0.0f32; n * c * hp * wp];
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    padded[((ni * c + ci) * hp + y + padding) * wp + xx + padding] =
                        x.at4(ni, ci, y, xx);
                }
            }
        }
    }
    let ho = (hp - kh) / stride + 1;
    let wo = (wp - kw) / stride + 1;
    let mut out = vec![0.0f32; n * kout * ho * wo];
    for ni in 0..n {
        for ko in 0..kout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b[ko]);
                    let cin: Vec<usize> = if depthwise { vec![ko] } else { (0..c).collect() };
                    for (wi, &ci) in cin.iter().enumerate() {
                        let wch = if depthwise { 0 } else { wi };
                        for ky in 0..kh {
                            for kx in 0..kw {
                                acc += padded
                                    [((ni * c + ci) * hp + oy * stride + ky) * wp + ox * stride + kx]
                                    * w.at4(ko, wch, ky, kx);
                            }
                        }
                    }
                    out[((ni * kout + ko) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn naive_pool(x: &Tensor, kind: PoolKind, window: usize, stride: usize) -> Vec<f32> {
    let (n, c, h, w) = (x.dims[0], x.dims[1], x.dims[2], x.dims[3]);
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut vals = Vec::new();
                    for ky in 0..window {
                        for kx in 0..window {
                            vals.push(x.at4(ni, ci, oy * stride + ky, ox * stride + kx));
                        }
                    }
                    out.push(match kind {
                        PoolKind::Max => vals.iter().copied().fold(f32::NEG_INFINITY, f32::max),
                        PoolKind::Avg => vals.iter().sum::<f32>() / vals.len() as f32,
                    });
                }
            }
        }
    }
    out
}

fn random_config(rng: &mut ChaCha8Rng) -> KernelConfig {
    let pick = |rng: &mut ChaCha8Rng, v: &[usize]| v[rng.random_range(0..v.len())];
    let tile_k = pick(rng, &[1, 2, 4, 8, 16, 32]);
    KernelConfig {
        tile_m: pick(rng, &[1, 2, 4, 8, 16, 32]),
        tile_n: pick(rng, &[1, 2, 4, 8, 16, 32]),
        tile_k,
        unroll: *[1usize, 2, 4, 8].iter().filter(|&&u| u <= tile_k).last().unwrap(),
        loop_order: LoopOrder::ALL[rng.random_range(0..6)],
        vector_width_hint: 4,
    }
}

#[test]
fn kernel_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f32;
    for case in 0..100 {
        // dense GEMM under a random config
        let (m, n, k) =
            (rng.random_range(1..48), rng.random_range(1..48), rng.random_range(1..64));
        let a = random_matrix(m, k, 1000 + case);
        let b = random_matrix(k, n, 2000 + case);
        let cfg = random_config(&mut rng);
        let got = gemm_tiled(&a, &b, &cfg).unwrap();
        let err = max_rel_err(&got.data, &naive_gemm(&a, &b));
        assert!(err <= 1e-5, "gemm case {} cfg {:?}: err {}", case, cfg, err);
        worst = worst.max(err);

        // sparse GEMM against the densified weights
        let sparsity = rng.random_range(0.5..0.97);
        let w = random_sparse_matrix(rng.random_range(1..48), k, sparsity, 3000 + case);
        let got = spmm_csr_tiled(&w, &b, &cfg).unwrap();
        let err = max_rel_err(&got.data, &naive_gemm(&csr_to_dense(&w).unwrap(), &b));
        assert!(err <= 1e-5, "spmm case {}: err {}", case, err);
        worst = worst.max(err);
    }
    for case in 0..100 {
        let (n, c, h) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(3..12));
        let w = rng.random_range(3..12);
        let kh = rng.random_range(1..=h.min(4));
        let kw = rng.random_range(1..=w.min(4));
        let stride = rng.random_range(1..3);
        let padding = rng.random_range(0..2);
        let kout = rng.random_range(1..5);
        let x = cadm_core::test_util::random_nchw(n, c, h, w, 4000 + case);
        let wt = cadm_core::test_util::random_tensor4(kout, c, kh, kw, 5000 + case);
        let bias: Vec<f32> = (0..kout).map(|_| rng.random_range(-0.5..0.5)).collect();

        let got = conv2d_direct(&x, &wt, Some(&bias), stride, padding).unwrap();
        let err = max_rel_err(&got.data, &naive_conv(&x, &wt, Some(&bias), stride, padding, false));
        assert!(err <= 1e-5, "conv case {}: err {}", case, err);
        worst = worst.max(err);

        let dw = cadm_core::test_util::random_tensor4(c, 1, kh, kw, 6000 + case);
        let dbias: Vec<f32> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let got = depthwise_conv2d(&x, &dw, Some(&dbias), stride, padding).unwrap();
        let err = max_rel_err(&got.data, &naive_conv(&x, &dw, Some(&dbias), stride, padding, true));
        assert!(err <= 1e-5, "depthwise case {}: err {}", case, err);
        worst = worst.max(err);

        let window = rng.random_range(1..=h.min(w).min(3));
        let pstride = rng.random_range(1..3);
        let kind = if case % 2 == 0 { PoolKind::Max } else { PoolKind::Avg };
        let got = pool2d(&x, kind, window, pstride).unwrap();
        let err = max_rel_err(&got.data, &naive_pool(&x, kind, window, pstride));
        assert!(err <= 1e-5, "pool case {}: err {}", case, err);
        worst = worst.max(err);
    }
    criterion(
        "kernel correctness vs naive oracles",
        true,
        &format!("100 cases per kernel, max rel err {:.2e} <= 1e-5", worst),
    );
}

#[test]
fn fusion_equivalence() {
    let g = build_reference_graph(ReferenceModel::MobilenetV1).unwrap();
    let (fused, report) = run_fusion_pipeline(&g).unwrap();
    let exec = ExecOptions { workers: 1, profile: false };
    let mut worst = 0.0f32;
    for seed in 0..20u64 {
        let x = seeded_input(&[1, 3, 224, 224], 97 + seed);
        let a = execute_graph(&g, &x, None, &exec).unwrap();
        let b = execute_graph(&fused, &x, None, &exec).unwrap();
        worst = worst.max(max_rel_err(&b.data, &a.data));
    }
    criterion(
        "fusion equivalence on mobilenet_v1",
        worst <= 1e-4,
        &format!("{} rewrites, max rel err {:.2e} over 20 inputs", report.rewrites.len(), worst),
    );
}

#[test]
fn projection_optimality() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // sparsity projection: exhaustive support enumeration up to size 12
    for n in 1..=12usize {
        for _ in 0..5 {
            let w: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            for k in 1..=n {
                let p = project_sparsity(&w, k).unwrap();
                assert!(p.iter().filter(|&&v| v != 0.0).count() <= k);
                let dist: f64 = w
                    .iter()
                    .zip(&p)
                    .map(|(&a, &b)| ((a - b) as f64) * ((a - b) as f64))
                    .sum();
                let best = best_support_distance(&w, k);
                assert!(
                    dist <= best + 1e-9,
                    "n {} k {}: got distance^2 {} vs optimum {}",
                    n,
                    k,
                    dist,
                    best
                );
            }
        }
    }
    // quantization projection: per-element nearest level, ties toward the
    // smaller magnitude
    for _ in 0..50 {
        let n = rng.random_range(1..20);
        let w: Vec<f32> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let bits = rng.random_range(2..=5);
        let levels = quant_levels(&w, bits).unwrap();
        let q = project_quantization(&w, &levels).unwrap();
        for (i, (&wi, &qi)) in w.iter().zip(&q).enumerate() {
            let min_d = levels.iter().map(|&l| (wi - l).abs()).fold(f32::INFINITY, f32::min);
            assert_eq!((wi - qi).abs(), min_d, "element {} not nearest", i);
            let tie_mag = levels
                .iter()
                .filter(|&&l| (wi - l).abs() == min_d)
                .map(|&l| l.abs())
                .fold(f32::INFINITY, f32::min);
            assert_eq!(qi.abs(), tie_mag, "element {} breaks ties upward", i);
        }
    }
    criterion(
        "projection optimality (exhaustive oracle, n <= 12)",
        true,
        "sparsity supports enumerated; quantization nearest-level verified",
    );
}

fn best_support_distance(w: &[f32], k: usize) -> f64 {
    let n = w.len();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let d: f64 = (0..n)
            .filter(|i| mask & (1 << i) == 0)
            .map(|i| (w[i] as f64) * (w[i] as f64))
            .sum();
        best = best.min(d);
    }
    best
}

// f64 replica of the trainer's forward pass, used as the finite-difference
// oracle so the differences are not drowned in f32 rounding
fn loss_f64(net: &TrainableNet, images: &[f32], labels: &[u8], batch: usize) -> f64 {
    let [c0, h0, w0] = net.input_dims;
    let sample = c0 * h0 * w0;
    let mut total = 0.0f64;
    for bi in 0..batch {
        let mut act: Vec<f64> =
            images[bi * sample..(bi + 1) * sample].iter().map(|&v| v as f64).collect();
        let mut dims = (c0, h0, w0);
        for layer in &net.layers {
            match layer {
                TrainLayer::Relu => {
                    for v in &mut act {
                        *v = v.max(0.0);
                    }
                }
                TrainLayer::Flatten => {}
                TrainLayer::Fc { in_dim, out_dim, w, b } => {
                    let mut y = vec![0.0f64; *out_dim];
                    for (k, yk) in y.iter_mut().enumerate() {
                        let mut acc = b[k] as f64;
                        for i in 0..*in_dim {
                            acc += w[k * in_dim + i] as f64 * act[i];
                        }
                        *yk = acc;
                    }
                    act = y;
                }
                TrainLayer::Conv2d { attrs, w, b } => {
                    let (c, h, wd) = dims;
                    let ho = conv_out_extent(h, attrs.kh, attrs.stride, attrs.padding).unwrap();
                    let wo = conv_out_extent(wd, attrs.kw, attrs.stride, attrs.padding).unwrap();
                    let mut y = vec![0.0f64; attrs.out_ch * ho * wo];
                    for ko in 0..attrs.out_ch {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let mut acc = b[ko] as f64;
                                for ci in 0..c {
                                    for ky in 0..attrs.kh {
                                        let iy = (oy * attrs.stride + ky) as isize
                                            - attrs.padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..attrs.kw {
                                            let ix = (ox * attrs.stride + kx) as isize
                                                - attrs.padding as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            acc += w[((ko * c + ci) * attrs.kh + ky) * attrs.kw
                                                + kx]
                                                as f64
                                                * act[(ci * h + iy as usize) * wd + ix as usize];
                                        }
                                    }
                                }
                                y[(ko * ho + oy) * wo + ox] = acc;
                            }
                        }
                    }
                    act = y;
                    dims = (attrs.out_ch, ho, wo);
                }
            }
        }
        let max = act.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + act.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - act[labels[bi] as usize];
    }
    total / batch as f64
}

#[test]
fn gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let attrs = ConvAttrs { in_ch: 1, out_ch: 2, kh: 3, kw: 3, stride: 1, padding: 1 };
    let net = TrainableNet {
        layers: vec![
            cadm_core::compress::conv_init(&mut rng, attrs),
            TrainLayer::Relu,
            TrainLayer::Flatten,
            {
                let (i, o) = (2 * 4 * 4, 3);
                let w = (0..o * i).map(|_| rng.random_range(-0.5..0.5)).collect();
                TrainLayer::Fc { in_dim: i, out_dim: o, w, b: vec![0.1, -0.2, 0.05] }
            },
        ],
        input_dims: [1, 4, 4],
        num_classes: 3,
    };
    let batch = 3;
    let images: Vec<f32> = (0..batch * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<u8> = (0..batch).map(|_| rng.random_range(0..3)).collect();

    let (_, grads) = forward_backward(&net, &images, &labels, batch).unwrap();
    let mut worst = 0.0f64;
    for (pi, li) in net.param_layer_indices().into_iter().enumerate() {
        let g = grads[li].as_ref().unwrap();
        let n_w = net.layers[li].weights().unwrap().len();
        for i in 0..n_w {
            let mut plus = net.clone();
            let mut minus = net.clone();
            let w0 = plus.layers[li].weights().unwrap()[i];
            let eps = 1e-3f32 * w0.abs().max(1.0);
            plus.layers[li].weights_mut().unwrap()[i] = w0 + eps;
            minus.layers[li].weights_mut().unwrap()[i] = w0 - eps;
            // the actual applied step, free of f32 representation error
            let h = (plus.layers[li].weights().unwrap()[i]
                - minus.layers[li].weights().unwrap()[i]) as f64;
            let numeric = (loss_f64(&plus, &images, &labels, batch)
                - loss_f64(&minus, &images, &labels, batch))
                / h;
            let rel = (g.dw[i] as f64 - numeric).abs() / numeric.abs().max(1e-2);
            assert!(rel <= 1e-4, "param layer {} weight {}: rel err {}", pi, i, rel);
            worst = worst.max(rel);
        }
    }
    criterion(
        "gradient check (analytic vs central differences)",
        true,
        &format!("conv/relu/flatten/fc net, max rel err {:.2e} <= 1e-4", worst),
    );
}

#[test]
fn mnist_admm_compression() {
    let p = pipeline();
    let retain_total: usize = p.final_spec.retain_k.iter().sum();
    let nnz = p.pruned.nonzero_weight_count();
    let residuals_decrease = p.histories.iter().all(|h| {
        h.len() >= 2 && h.last().unwrap().residual < h.first().unwrap().residual
    });
    let pass = p.baseline_acc >= 0.97
        && p.pruned_acc >= p.baseline_acc - 0.01
        && residuals_decrease
        && nnz <= retain_total;
    criterion(
        "MNIST ADMM compression (10x progressive pruning)",
        pass,
        &format!(
            "baseline {:.4}, pruned {:.4} (drop {:.2}pp), nnz {}/{} (cap {}), residuals decrease: {}",
            p.baseline_acc,
            p.pruned_acc,
            (p.baseline_acc - p.pruned_acc) * 100.0,
            nnz,
            p.pruned.param_count(),
            retain_total,
            residuals_decrease
        ),
    );
}

#[test]
fn quantization_feasibility() {
    let p = pipeline();
    let mut net = p.pruned.clone();
    let spec = ConstraintSpec::Quant(QuantSpec::uniform(&net, 4).unwrap());
    let schedule = AdmmSchedule {
        rho0: 1e-3,
        rho_factor: 10.0,
        stages: 3,
        iters_per_stage: 1,
        epochs: 2,
        sgd: SgdOptions { lr: 0.05, momentum: 0.9, batch: 64 },
        seed: 42,
    };
    let (state, _) = admm_compress(&mut net, &spec, &p.train, &schedule, None).unwrap();
    masked_retrain(&mut net, &state, &spec, &p.train, 2, &schedule.sgd, 42).unwrap();

    let levels = match &spec {
        ConstraintSpec::Quant(q) => &q.levels,
        _ => unreachable!(),
    };
    let mut off_grid = 0usize;
    for (pi, li) in net.param_layer_indices().into_iter().enumerate() {
        for &w in net.layers[li].weights().unwrap() {
            if !levels[pi].contains(&w) {
                off_grid += 1;
            }
        }
    }
    let quant_acc = accuracy(&net, &p.test).unwrap();
    let drop = p.pruned_acc - quant_acc;
    criterion(
        "4-bit quantization feasibility",
        off_grid == 0 && drop <= 0.015,
        &format!(
            "off-grid weights {}, accuracy {:.4} vs pruned {:.4} (drop {:.2}pp <= 1.5pp)",
            off_grid,
            quant_acc,
            p.pruned_acc,
            drop * 100.0
        ),
    );
}

fn median_ms<F: FnMut()>(runs: usize, mut f: F) -> f64 {
    f(); // warmup
    let mut samples: Vec<f64> = (0..runs)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples[(runs - 1) / 2]
}

fn seeded_input(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    Tensor::new(dims.to_vec(), Layout::Nchw, data).unwrap()
}

/// Copy of the graph with dense conv/FC/gemm weights magnitude-pruned to the
/// retained fraction and stored CSR (depthwise convs stay dense).
fn sparsified(g: &Graph, keep_fraction: f64) -> Graph {
    let mut out = g.clone();
    for node in &mut out.nodes {
        let retained = match &node.kind {
            LayerKind::Conv2d(_)
            | LayerKind::FusedConvBnAct { depthwise: false, .. }
            | LayerKind::FullyConnected { .. }
            | LayerKind::Gemm { .. } => true,
            _ => false,
        };
        if !retained {
            continue;
        }
        if let Weights::Dense(t) = &node.weights {
            let rows_cols = match &node.kind {
                LayerKind::Conv2d(a) | LayerKind::FusedConvBnAct { attrs: a, .. } => {
                    (a.out_ch, a.in_ch * a.kh * a.kw)
                }
                LayerKind::FullyConnected { in_dim, out_dim } => (*out_dim, *in_dim),
                LayerKind::Gemm { out_rows, inner } => (*out_rows, *inner),
                _ => unreachable!(),
            };
            let retain = ((t.data.len() as f64 * keep_fraction).round() as usize)
                .clamp(1, t.data.len());
            let pruned = project_sparsity(&t.data, retain).unwrap();
            let m = Tensor::matrix(rows_cols.0, rows_cols.1, pruned).unwrap();
            node.weights = Weights::Sparse(cadm_core::sparse::csr_from_dense(&m).unwrap());
        }
    }
    out
}

#[test]
fn sparse_speedup() {
    // tuned SpMM vs tuned dense GEMM at 512^3, 90% sparsity
    let mut cache = TuneCache::default();
    let opts = TunerOptions::default();
    let key_d = ShapeKey { kind: KernelId::GemmDense, m: 512, n: 512, k: 512, sparsity_bucket: bucket_of(0.0) };
    let key_s = ShapeKey { kind: KernelId::SpmmCsr, m: 512, n: 512, k: 512, sparsity_bucket: bucket_of(0.9) };
    let cfg_d = tune_layer(&key_d, 16, &mut cache, &opts).unwrap();
    let cfg_s = tune_layer(&key_s, 16, &mut cache, &opts).unwrap();
    let w = random_sparse_matrix(512, 512, 0.9, 11);
    let wd = csr_to_dense(&w).unwrap();
    let x = random_matrix(512, 512, 12);
    let t_dense = median_ms(7, || {
        std::hint::black_box(gemm_tiled(&wd, &x, &cfg_d).unwrap());
    });
    let t_sparse = median_ms(7, || {
        std::hint::black_box(spmm_csr_tiled(&w, &x, &cfg_s).unwrap());
    });
    let kernel_ratio = t_dense / t_sparse;

    // end-to-end: 90%-pruned mobilenet_v1 vs its dense counterpart, both
    // through the same fused execution path
    let (dense, _) = run_fusion_pipeline(&mobilenet_v1(128, 7)).unwrap();
    let sparse = sparsified(&dense, 0.1);
    let input = seeded_input(&[1, 3, 128, 128], 13);
    let exec = ExecOptions { workers: 1, profile: false };
    let t_dnet = median_ms(7, || {
        std::hint::black_box(execute_graph(&dense, &input, None, &exec).unwrap());
    });
    let t_snet = median_ms(7, || {
        std::hint::black_box(execute_graph(&sparse, &input, None, &exec).unwrap());
    });
    let net_ratio = t_dnet / t_snet;

    criterion(
        "sparse speedup (tuned SpMM and end-to-end mobilenet_v1)",
        kernel_ratio >= 2.0 && net_ratio >= 1.5,
        &format!(
            "512^3 kernel {:.2}x (>= 2.0), mobilenet {:.2}x (>= 1.5), medians of 7",
            kernel_ratio, net_ratio
        ),
    );
}

#[test]
fn autotuner_soundness() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let opts = TunerOptions::default();

    // tuned config never regresses the default by more than 5%
    let mut worst_ratio = 0.0f64;
    for i in 0..10 {
        let sparse = i % 2 == 1;
        let key = ShapeKey {
            kind: if sparse { KernelId::SpmmCsr } else { KernelId::GemmDense },
            m: rng.random_range(32..=128),
            n: rng.random_range(32..=128),
            k: rng.random_range(32..=128),
            sparsity_bucket: bucket_of(if sparse { 0.9 } else { 0.0 }),
        };
        let mut cache = TuneCache::default();
        let tuned = tune_layer(&key, 32, &mut cache, &opts).unwrap();
        let t_tuned = (0..3)
            .map(|_| measure_config(&key, &tuned, 5).unwrap())
            .fold(f64::INFINITY, f64::min);
        let t_default = (0..3)
            .map(|_| measure_config(&key, &KernelConfig::default(), 5).unwrap())
            .fold(f64::INFINITY, f64::min);
        let ratio = t_tuned / t_default;
        assert!(ratio <= 1.05, "shape {:?}: tuned {:.1}us vs default {:.1}us", key, t_tuned, t_default);
        worst_ratio = worst_ratio.max(ratio);
    }

    // pruning the search space keeps a near-optimal candidate (exhaustive)
    let key = ShapeKey { kind: KernelId::GemmDense, m: 64, n: 64, k: 64, sparsity_bucket: 0 };
    let full = enumerate_search_space(&key);
    let mut timed: Vec<(KernelConfig, f64)> = Vec::new();
    for cfg in &full.candidates {
        if let Ok(us) = measure_config(&key, cfg, 3) {
            timed.push((*cfg, us));
        }
    }
    let best_full = timed.iter().map(|(_, t)| *t).fold(f64::INFINITY, f64::min);
    let pruned = prune_search_space(&full, &key, 0.0, opts.cache_budget);
    let best_pruned = timed
        .iter()
        .filter(|(c, _)| pruned.candidates.contains(c))
        .map(|(_, t)| *t)
        .fold(f64::INFINITY, f64::min);
    let prune_ratio = best_pruned / best_full;

    // a cache hit returns the stored config without measuring anything
    let sentinel = KernelConfig {
        tile_m: 16,
        tile_n: 8,
        tile_k: 16,
        unroll: 2,
        loop_order: LoopOrder::Nmk,
        vector_width_hint: 4,
    };
    let mut cache = TuneCache::default();
    cache.record(key, sentinel, 123.0, 7);
    let t0 = Instant::now();
    let got = tune_layer(&key, 32, &mut cache, &opts).unwrap();
    let hit_us = t0.elapsed().as_micros();
    let entry = cache.get(&key).unwrap();
    let cache_ok = got == sentinel && entry.trials == 7 && entry.micros == 123.0;

    criterion(
        "autotuner soundness",
        worst_ratio <= 1.05 && prune_ratio <= 1.05 && cache_ok,
        &format!(
            "tuned/default worst {:.3} <= 1.05; pruned/full best {:.3} <= 1.05 ({} of {} candidates kept); cache hit ok in {}us",
            worst_ratio,
            prune_ratio,
            pruned.candidates.len(),
            timed.len(),
            hit_us
        ),
    );
}

#[test]
fn load_elimination() {
    let cfg = KernelConfig { tile_n: 8, ..KernelConfig::default() };
    let w = random_sparse_matrix(96, 96, 0.9, 21);
    let packed = pack_weights_tiled(&w, &cfg);
    let n = 64usize;
    let x = random_matrix(96, n, 22);

    let mut tiled = LoadCounter::default();
    let got = spmm_csr_tiled_counted(&packed, &x, &cfg, &mut tiled).unwrap();
    let mut elementwise = LoadCounter::default();
    let baseline = spmm_csr_elementwise_counted(&w, &x, &mut elementwise).unwrap();
    assert!(max_rel_err(&got.data, &baseline.data) <= 1e-5);

    let nnz = w.nnz() as u64;
    let bound = nnz * (n as u64).div_ceil(cfg.tile_n as u64);
    let worst_case = nnz * n as u64;
    assert_eq!(elementwise.weight_loads, worst_case);
    criterion(
        "load-elimination counter",
        tiled.weight_loads <= bound && tiled.weight_loads < worst_case,
        &format!(
            "packed loads {} <= nnz*ceil(N/tile_n) = {}, elementwise baseline {}",
            tiled.weight_loads, bound, worst_case
        ),
    );
}

#[test]
fn persistence() {
    let dir = tempfile::tempdir().unwrap();

    // 50 randomized graphs survive save/load bit-exactly
    for seed in 0..50u64 {
        let mut g = match seed % 4 {
            0 => cadm_core::reference::lenet5(seed),
            1 => cadm_core::reference::lenet_300_100(seed),
            2 => cadm_core::reference::mobilenet_v2_stub(32, seed),
            _ => mobilenet_v1(32, seed),
        };
        if seed % 2 == 0 {
            g = sparsified(&g, 0.3);
        }
        let p1 = dir.path().join(format!("g{}.cadm", seed));
        let p2 = dir.path().join(format!("g{}b.cadm", seed));
        save_model(&g, &p1).unwrap();
        let back = load_model(&p1).unwrap();
        assert_eq!(back, g, "graph {} changed across round-trip", seed);
        save_model(&back, &p2).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "graph {} serialization not bit-stable",
            seed
        );
    }

    // the exported compressed model re-infers what the trainer computes
    let p = pipeline();
    let g = export_compressed(&p.pruned, Some(&p.final_spec)).unwrap();
    let exec = ExecOptions { workers: 1, profile: false };
    let mut worst = 0.0f32;
    for i in 0..100 {
        let image = p.test.image(i);
        let want = logits_for(&p.pruned, image).unwrap();
        let x = Tensor::new(vec![1, 1, 28, 28], Layout::Nchw, image.to_vec()).unwrap();
        let got = execute_graph(&g, &x, None, &exec).unwrap();
        worst = worst.max(max_rel_err(&got.data, &want));
    }
    criterion(
        "persistence (round-trip and export re-inference)",
        worst <= 1e-5,
        &format!("50 graphs bit-exact; exported model max rel err {:.2e} over 100 images", worst),
    );
}
