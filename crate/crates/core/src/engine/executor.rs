//! Topological graph execution with sparse/dense kernel dispatch and
//! per-layer kernel configs from the tuning cache.

use std::collections::HashMap;
use std::time::Instant;

use crate::autotune::{bucket_of, KernelId, ShapeKey, TuneCache};
use crate::engine::config::{KernelConfig, LoadCounter};
use crate::engine::conv::depthwise_conv2d;
use crate::engine::gemm::gemm_tiled_mt;
use crate::engine::pool::{apply_activation, elementwise_add, pool2d};
use crate::engine::spmm::{spmm_csr_tiled_counted, spmm_csr_tiled_mt};
use crate::error::{Error, Result};
use crate::graph::{topological_order, Graph, LayerKind, LayerSpec, Weights};
use crate::sparse::SparseMatrixCsr;
use crate::tensor::{im2col_image, Layout, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct ExecOptions {
    pub workers: usize,
    pub profile: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self { workers: 1, profile: false }
    }
}

/// One profile line per executed node; printed tab-separated by the CLI.
#[derive(Clone, Debug)]
pub struct ProfileRow {
    pub node: u32,
    pub kind: String,
    pub micros: u128,
    pub weight_loads: u64,
}

impl ProfileRow {
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.node, self.kind, self.micros, self.weight_loads)
    }
}

pub fn execute_graph(
    g: &Graph,
    input: &Tensor,
    cache: Option<&TuneCache>,
    opts: &ExecOptions,
) -> Result<Tensor> {
    Ok(execute_inner(g, input, cache, opts)?.0)
}

pub fn execute_graph_profiled(
    g: &Graph,
    input: &Tensor,
    cache: Option<&TuneCache>,
    opts: &ExecOptions,
) -> Result<(Tensor, Vec<ProfileRow>)> {
    let mut o = *opts;
    o.profile = true;
    let (t, rows) = execute_inner(g, input, cache, &o)?;
    Ok((t, rows))
}

fn execute_inner(
    g: &Graph,
    input: &Tensor,
    cache: Option<&TuneCache>,
    opts: &ExecOptions,
) -> Result<(Tensor, Vec<ProfileRow>)> {
    let order = topological_order(g)?;
    if g.inputs.len() != 1 {
        return Err(Error::Shape(format!("executor expects exactly 1 input node, got {}", g.inputs.len())));
    }
    if g.outputs.len() != 1 {
        return Err(Error::Shape(format!("executor expects exactly 1 output node, got {}", g.outputs.len())));
    }
    let output_id = g.outputs[0];

    // Remaining-consumer counts drive greedy buffer release.
    let mut remaining: HashMap<u32, usize> = HashMap::new();
    for &(s, _) in &g.edges {
        *remaining.entry(s).or_insert(0) += 1;
    }

    let mut live: HashMap<u32, Tensor> = HashMap::new();
    let mut profile = Vec::new();
    for id in order {
        let node = g.node(id).unwrap();
        let preds = g.preds(id);
        let ins: Vec<&Tensor> = preds
            .iter()
            .map(|p| live.get(p).ok_or(Error::Execution { node: id, msg: "missing input buffer".into() }))
            .collect::<Result<_>>()?;
        let start = Instant::now();
        let mut counter = LoadCounter::default();
        let out = run_node(node, &ins, input, cache, opts, &mut counter)
            .map_err(|e| Error::Execution { node: id, msg: e.to_string() })?;
        if opts.profile {
            profile.push(ProfileRow {
                node: id,
                kind: node.kind.name().to_string(),
                micros: start.elapsed().as_micros(),
                weight_loads: counter.weight_loads,
            });
        }
        for p in preds {
            let r = remaining.get_mut(&p).unwrap();
            *r -= 1;
            if *r == 0 && p != output_id {
                live.remove(&p);
            }
        }
        live.insert(id, out);
    }
    let out = live
        .remove(&output_id)
        .ok_or(Error::Execution { node: output_id, msg: "output buffer missing".into() })?;
    Ok((out, profile))
}

fn lookup_config(
    cache: Option<&TuneCache>,
    kernel: KernelId,
    m: usize,
    n: usize,
    k: usize,
    sparsity: f64,
) -> KernelConfig {
    let key = ShapeKey { kind: kernel, m, n, k, sparsity_bucket: bucket_of(sparsity) };
    cache.and_then(|c| c.get(&key)).map(|e| e.config).unwrap_or_default()
}

fn filter_matrix(w: &Tensor) -> Tensor {
    // (K,C,kh,kw) NCHW filter data is already row-major (K x C·kh·kw)
    Tensor::matrix(w.dims[0], w.dims[1] * w.dims[2] * w.dims[3], w.data.clone()).unwrap()
}

fn add_row_bias(m: &mut Tensor, bias: Option<&Vec<f32>>) {
    if let Some(b) = bias {
        let cols = m.dims[1];
        for (r, bv) in b.iter().enumerate() {
            for v in &mut m.data[r * cols..(r + 1) * cols] {
                *v += bv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_via_matmul(
    x: &Tensor,
    weights: &Weights,
    bias: Option<&Vec<f32>>,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    cache: Option<&TuneCache>,
    opts: &ExecOptions,
    counter: &mut LoadCounter,
) -> Result<Tensor> {
    let n = x.dims[0];
    let mut out: Option<Tensor> = None;
    for ni in 0..n {
        let cols = im2col_image(x, ni, kh, kw, stride, padding)?;
        let mut prod = match weights {
            Weights::Dense(w) => {
                let wmat = filter_matrix(w);
                let cfg = lookup_config(cache, KernelId::GemmDense, wmat.dims[0], cols.dims[1], cols.dims[0], 0.0);
                gemm_tiled_mt(&wmat, &cols, &cfg, opts.workers)?
            }
            Weights::Sparse(s) => {
                let cfg = lookup_config(cache, KernelId::SpmmCsr, s.rows, cols.dims[1], s.cols, s.sparsity());
                run_spmm(s, &cols, &cfg, opts, counter)?
            }
            Weights::None => return Err(Error::Shape("conv node has no weights".into())),
        };
        add_row_bias(&mut prod, bias);
        let (ho_wo, _) = (prod.dims[1], prod.dims[0]);
        let out_t = out.get_or_insert_with(|| {
            // spatial dims recovered from conv arithmetic
            let ho = crate::tensor::conv_out_extent(x.dims[2], kh, stride, padding).unwrap();
            let wo = crate::tensor::conv_out_extent(x.dims[3], kw, stride, padding).unwrap();
            Tensor::zeros(vec![n, out_ch, ho, wo], Layout::Nchw)
        });
        let per = out_ch * ho_wo;
        out_t.data[ni * per..(ni + 1) * per].copy_from_slice(&prod.data);
    }
    Ok(out.unwrap())
}

fn run_spmm(
    s: &SparseMatrixCsr,
    x: &Tensor,
    cfg: &KernelConfig,
    opts: &ExecOptions,
    counter: &mut LoadCounter,
) -> Result<Tensor> {
    if opts.profile {
        spmm_csr_tiled_counted(s, x, cfg, counter)
    } else {
        spmm_csr_tiled_mt(s, x, cfg, opts.workers)
    }
}

fn run_node(
    node: &LayerSpec,
    ins: &[&Tensor],
    graph_input: &Tensor,
    cache: Option<&TuneCache>,
    opts: &ExecOptions,
    counter: &mut LoadCounter,
) -> Result<Tensor> {
    match &node.kind {
        LayerKind::Input { dims } => {
            if &graph_input.dims != dims {
                return Err(Error::Shape(format!(
                    "input dims {:?} != declared {:?}",
                    graph_input.dims, dims
                )));
            }
            Ok(graph_input.clone())
        }
        LayerKind::Conv2d(a) => conv_via_matmul(
            ins[0],
            &node.weights,
            node.bias.as_ref(),
            a.out_ch,
            a.kh,
            a.kw,
            a.stride,
            a.padding,
            cache,
            opts,
            counter,
        ),
        LayerKind::DepthwiseConv2d { kh: _, kw: _, stride, padding, .. } => match &node.weights {
            Weights::Dense(w) => {
                depthwise_conv2d(ins[0], w, node.bias.as_deref(), *stride, *padding)
            }
            _ => Err(Error::Shape("depthwise conv requires dense weights".into())),
        },
        LayerKind::BatchNorm => {
            let bn = node
                .bn_params
                .as_ref()
                .ok_or_else(|| Error::Shape("BatchNorm node missing bn_params".into()))?;
            let x = ins[0];
            x.require_nchw()?;
            if x.dims[1] != bn.gamma.len() {
                return Err(Error::Shape(format!(
                    "bn channels {} != input channels {}",
                    bn.gamma.len(),
                    x.dims[1]
                )));
            }
            let mut out = x.clone();
            let (n, c, h, w) = (x.dims[0], x.dims[1], x.dims[2], x.dims[3]);
            let hw = h * w;
            for ni in 0..n {
                for ci in 0..c {
                    let inv = 1.0 / (bn.var[ci] + bn.eps).sqrt();
                    let scale = bn.gamma[ci] * inv;
                    let shift = bn.beta[ci] - bn.mean[ci] * scale;
                    let base = (ni * c + ci) * hw;
                    for v in &mut out.data[base..base + hw] {
                        *v = *v * scale + shift;
                    }
                }
            }
            Ok(out)
        }
        LayerKind::Activation(act) => {
            let mut out = ins[0].clone();
            apply_activation(&mut out, *act);
            Ok(out)
        }
        LayerKind::Pool { kind, window, stride } => pool2d(ins[0], *kind, *window, *stride),
        LayerKind::FullyConnected { in_dim, out_dim } => {
            let x = ins[0];
            let batch = x.dims[0];
            let feat: usize = x.dims[1..].iter().product();
            if feat != *in_dim {
                return Err(Error::Shape(format!("flattened features {} != in_dim {}", feat, in_dim)));
            }
            // column-major activations: xt[d, b]
            let mut xt = vec![0.0f32; feat * batch];
            for b in 0..batch {
                for d in 0..feat {
                    xt[d * batch + b] = x.data[b * feat + d];
                }
            }
            let xt = Tensor::matrix(feat, batch, xt)?;
            let mut prod = match &node.weights {
                Weights::Dense(w) => {
                    let cfg = lookup_config(cache, KernelId::GemmDense, *out_dim, batch, feat, 0.0);
                    gemm_tiled_mt(w, &xt, &cfg, opts.workers)?
                }
                Weights::Sparse(s) => {
                    let cfg = lookup_config(cache, KernelId::SpmmCsr, s.rows, batch, s.cols, s.sparsity());
                    run_spmm(s, &xt, &cfg, opts, counter)?
                }
                Weights::None => return Err(Error::Shape("fc node has no weights".into())),
            };
            add_row_bias(&mut prod, node.bias.as_ref());
            let mut out = vec![0.0f32; batch * out_dim];
            for b in 0..batch {
                for o in 0..*out_dim {
                    out[b * out_dim + o] = prod.data[o * batch + b];
                }
            }
            Tensor::matrix(batch, *out_dim, out)
        }
        LayerKind::Add => elementwise_add(ins[0], ins[1]),
        LayerKind::Gemm { out_rows, inner } => {
            let x = ins[0];
            x.require_nchw()?;
            let (n, c, h, w) = (x.dims[0], x.dims[1], x.dims[2], x.dims[3]);
            if c != *inner {
                return Err(Error::Shape(format!("input channels {} != gemm inner {}", c, inner)));
            }
            let hw = h * w;
            let mut out = Tensor::zeros(vec![n, *out_rows, h, w], Layout::Nchw);
            for ni in 0..n {
                let img = Tensor::matrix(c, hw, x.data[ni * c * hw..(ni + 1) * c * hw].to_vec())?;
                let mut prod = match &node.weights {
                    Weights::Dense(wm) => {
                        let cfg = lookup_config(cache, KernelId::GemmDense, *out_rows, hw, c, 0.0);
                        gemm_tiled_mt(wm, &img, &cfg, opts.workers)?
                    }
                    Weights::Sparse(s) => {
                        let cfg = lookup_config(cache, KernelId::SpmmCsr, s.rows, hw, s.cols, s.sparsity());
                        run_spmm(s, &img, &cfg, opts, counter)?
                    }
                    Weights::None => return Err(Error::Shape("gemm node has no weights".into())),
                };
                add_row_bias(&mut prod, node.bias.as_ref());
                let per = *out_rows * hw;
                out.data[ni * per..(ni + 1) * per].copy_from_slice(&prod.data);
            }
            Ok(out)
        }
        LayerKind::FusedConvBnAct { depthwise, attrs, act } => {
            let mut out = if *depthwise {
                match &node.weights {
                    Weights::Dense(w) => depthwise_conv2d(
                        ins[0],
                        w,
                        node.bias.as_deref(),
                        attrs.stride,
                        attrs.padding,
                    )?,
                    _ => return Err(Error::Shape("depthwise conv requires dense weights".into())),
                }
            } else {
                conv_via_matmul(
                    ins[0],
                    &node.weights,
                    node.bias.as_ref(),
                    attrs.out_ch,
                    attrs.kh,
                    attrs.kw,
                    attrs.stride,
                    attrs.padding,
                    cache,
                    opts,
                    counter,
                )?
            };
            apply_activation(&mut out, *act);
            Ok(out)
        }
    }
}
