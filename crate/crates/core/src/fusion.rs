//! Graph rewrite passes: BN folding, conv+BN+activation fusion, and
//! pointwise-conv-to-GEMM transformation.

use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{ActKind, ConvAttrs, Graph, LayerKind, LayerSpec, Weights};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Rewrite {
    pub pass: &'static str,
    pub consumed: Vec<u32>,
    pub produced: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FusionReport {
    pub rewrites: Vec<Rewrite>,
    pub nodes_before: usize,
    pub nodes_after: usize,
}

impl FusionReport {
    fn merge(&mut self, other: FusionReport) {
        self.rewrites.extend(other.rewrites);
        self.nodes_after = other.nodes_after;
    }
}

impl fmt::Display for FusionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "nodes: {} -> {}", self.nodes_before, self.nodes_after)?;
        for r in &self.rewrites {
            writeln!(f, "{}: {:?} -> {}", r.pass, r.consumed, r.produced)?;
        }
        Ok(())
    }
}

/// Fold an immediately-following BatchNorm into a conv layer:
/// w'_k = w_k * g_k / sqrt(var_k + eps), b'_k = beta_k + (b_k - mean_k) * g_k / sqrt(var_k + eps).
pub fn fold_batchnorm(conv: &LayerSpec, bn: &LayerSpec) -> Result<LayerSpec> {
    let bn_params = bn
        .bn_params
        .as_ref()
        .ok_or_else(|| Error::Shape("BatchNorm node missing bn_params".into()))?;
    let out_ch = match &conv.kind {
        LayerKind::Conv2d(a) => a.out_ch,
        LayerKind::DepthwiseConv2d { channels, .. } => *channels,
        LayerKind::FusedConvBnAct { attrs, .. } => attrs.out_ch,
        other => {
            return Err(Error::Shape(format!("cannot fold BatchNorm into {}", other.name())))
        }
    };
    if bn_params.gamma.len() != out_ch {
        return Err(Error::Shape(format!(
            "bn channels {} != conv output channels {}",
            bn_params.gamma.len(),
            out_ch
        )));
    }
    if bn_params.var.iter().any(|&v| v + bn_params.eps <= 0.0) {
        return Err(Error::Shape("bn var + eps must be positive".into()));
    }
    let scale: Vec<f32> = (0..out_ch)
        .map(|k| bn_params.gamma[k] / (bn_params.var[k] + bn_params.eps).sqrt())
        .collect();
    let mut fused = conv.clone();
    match &mut fused.weights {
        Weights::Dense(t) => {
            // output channel is the leading axis for conv, depthwise, and fc-like weights
            let per: usize = t.dims[1..].iter().product();
            for k in 0..out_ch {
                for v in &mut t.data[k * per..(k + 1) * per] {
                    *v *= scale[k];
                }
            }
        }
        Weights::Sparse(s) => {
            for k in 0..out_ch {
                for p in s.row_ptr[k] as usize..s.row_ptr[k + 1] as usize {
                    s.values[p] *= scale[k];
                }
            }
        }
        Weights::None => return Err(Error::Shape("conv node has no weights".into())),
    }
    let old_bias = fused.bias.clone().unwrap_or_else(|| vec![0.0; out_ch]);
    fused.bias = Some(
        (0..out_ch)
            .map(|k| bn_params.beta[k] + (old_bias[k] - bn_params.mean[k]) * scale[k])
            .collect(),
    );
    Ok(fused)
}

fn sole_successor(g: &Graph, id: u32) -> Option<u32> {
    let succs = g.succs(id);
    if succs.len() == 1 {
        Some(succs[0])
    } else {
        None
    }
}

/// Rewrite every Conv2D/DepthwiseConv2D (plus an optional directly-following
/// BN and activation whose intermediates have exactly one consumer) into a
/// single FusedConvBnAct node carrying folded weights. The fused node keeps
/// the conv's id.
pub fn fuse_conv_bn_act(g: &Graph) -> Result<(Graph, FusionReport)> {
    let mut g = g.clone();
    let mut report =
        FusionReport { rewrites: Vec::new(), nodes_before: g.nodes.len(), nodes_after: 0 };
    let conv_ids: Vec<u32> = g
        .nodes
        .iter()
        .filter(|n| {
            matches!(n.kind, LayerKind::Conv2d(_) | LayerKind::DepthwiseConv2d { .. })
        })
        .map(|n| n.id)
        .collect();
    for id in conv_ids {
        let mut consumed = vec![id];
        let mut tail = id;
        // optional BN with the conv as its only producer path
        let bn_id = sole_successor(&g, tail).filter(|&s| {
            matches!(g.node(s).map(|n| &n.kind), Some(LayerKind::BatchNorm))
        });
        let mut spec = g.node(id).unwrap().clone();
        if let Some(b) = bn_id {
            spec = fold_batchnorm(&spec, g.node(b).unwrap())?;
            spec.bn_params = None;
            consumed.push(b);
            tail = b;
        }
        let act_id = sole_successor(&g, tail).filter(|&s| {
            matches!(g.node(s).map(|n| &n.kind), Some(LayerKind::Activation(_)))
        });
        let mut act = ActKind::Identity;
        if let Some(a) = act_id {
            if let Some(LayerKind::Activation(kind)) = g.node(a).map(|n| &n.kind) {
                act = *kind;
            }
            consumed.push(a);
            tail = a;
        }
        let (depthwise, attrs) = match &spec.kind {
            LayerKind::Conv2d(a) => (false, *a),
            LayerKind::DepthwiseConv2d { channels, kh, kw, stride, padding } => (
                true,
                ConvAttrs {
                    in_ch: *channels,
                    out_ch: *channels,
                    kh: *kh,
                    kw: *kw,
                    stride: *stride,
                    padding: *padding,
                },
            ),
            _ => unreachable!(),
        };
        spec.kind = LayerKind::FusedConvBnAct { depthwise, attrs, act };
        // splice: fused node keeps the conv id; tail's out-edges move to it
        let out_edges: Vec<u32> = g.succs(tail);
        g.edges.retain(|&(s, d)| {
            !(consumed.contains(&s) && consumed.contains(&d)) && !(s == tail)
        });
        for d in out_edges {
            g.edges.push((id, d));
        }
        g.nodes.retain(|n| n.id == id || !consumed.contains(&n.id));
        *g.node_mut(id).unwrap() = spec;
        report.rewrites.push(Rewrite { pass: "fuse-conv-bn-act", consumed, produced: id });
    }
    g.recompute_io();
    report.nodes_after = g.nodes.len();
    Ok((g, report))
}

/// Rewrite 1x1, stride-1, pad-0 convolutions (plain or fused) into Gemm
/// nodes; a fused node's non-identity activation survives as a following
/// Activation node.
pub fn rewrite_pointwise_conv_to_gemm(g: &Graph) -> Result<(Graph, FusionReport)> {
    let mut g = g.clone();
    let mut report =
        FusionReport { rewrites: Vec::new(), nodes_before: g.nodes.len(), nodes_after: 0 };
    let mut next_id = g.next_id();
    let candidates: Vec<(u32, ConvAttrs, Option<ActKind>)> = g
        .nodes
        .iter()
        .filter_map(|n| match &n.kind {
            LayerKind::Conv2d(a) => Some((n.id, *a, None)),
            LayerKind::FusedConvBnAct { depthwise: false, attrs, act } => {
                Some((n.id, *attrs, Some(*act)))
            }
            _ => None,
        })
        .filter(|(_, a, _)| a.kh == 1 && a.kw == 1 && a.stride == 1 && a.padding == 0)
        .collect();
    for (id, attrs, act) in candidates {
        let node = g.node_mut(id).unwrap();
        node.weights = match std::mem::replace(&mut node.weights, Weights::None) {
            Weights::Dense(t) => {
                Weights::Dense(Tensor::matrix(attrs.out_ch, attrs.in_ch, t.data).unwrap())
            }
            w => w,
        };
        node.kind = LayerKind::Gemm { out_rows: attrs.out_ch, inner: attrs.in_ch };
        let mut consumed = vec![id];
        let mut produced = id;
        if let Some(kind) = act {
            if kind != ActKind::Identity {
                // keep the fused activation as its own node after the Gemm
                let act_id = next_id;
                next_id += 1;
                let out_edges = g.succs(id);
                g.edges.retain(|&(s, _)| s != id);
                g.nodes.push(LayerSpec::new(act_id, LayerKind::Activation(kind)));
                g.edges.push((id, act_id));
                for d in out_edges {
                    g.edges.push((act_id, d));
                }
                consumed = vec![id];
                produced = act_id;
            }
        }
        report.rewrites.push(Rewrite { pass: "pointwise-to-gemm", consumed, produced });
    }
    g.recompute_io();
    report.nodes_after = g.nodes.len();
    Ok((g, report))
}

/// Fusion then pointwise rewrite, repeated to fixpoint (idempotent after one
/// round by construction).
pub fn run_fusion_pipeline(g: &Graph) -> Result<(Graph, FusionReport)> {
    let mut current = g.clone();
    let mut total =
        FusionReport { rewrites: Vec::new(), nodes_before: g.nodes.len(), nodes_after: g.nodes.len() };
    loop {
        let (g1, r1) = fuse_conv_bn_act(&current)?;
        let (g2, r2) = rewrite_pointwise_conv_to_gemm(&g1)?;
        let changed = !r1.rewrites.is_empty() || !r2.rewrites.is_empty();
        total.merge(r1);
        total.merge(r2);
        current = g2;
        if !changed {
            break;
        }
    }
    Ok((current, total))
}
