//! Layer-graph IR: node kinds, validation diagnostics, deterministic
//! topological scheduling, shape inference, and reference-topology builders.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;

use crate::error::{Error, Result};
use crate::sparse::SparseMatrixCsr;
use crate::tensor::{conv_out_extent, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActKind {
    Identity,
    Relu,
    Relu6,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvAttrs {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Input { dims: Vec<usize> },
    Conv2d(ConvAttrs),
    DepthwiseConv2d { channels: usize, kh: usize, kw: usize, stride: usize, padding: usize },
    BatchNorm,
    Activation(ActKind),
    Pool { kind: PoolKind, window: usize, stride: usize },
    FullyConnected { in_dim: usize, out_dim: usize },
    Add,
    /// Per image: out[k, p] = sum_c w[k, c] * in[c, p] over flattened spatial p.
    Gemm { out_rows: usize, inner: usize },
    FusedConvBnAct { depthwise: bool, attrs: ConvAttrs, act: ActKind },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "Input",
            LayerKind::Conv2d(_) => "Conv2D",
            LayerKind::DepthwiseConv2d { .. } => "DepthwiseConv2D",
            LayerKind::BatchNorm => "BatchNorm",
            LayerKind::Activation(_) => "Activation",
            LayerKind::Pool { .. } => "Pool",
            LayerKind::FullyConnected { .. } => "FullyConnected",
            LayerKind::Add => "Add",
            LayerKind::Gemm { .. } => "Gemm",
            LayerKind::FusedConvBnAct { .. } => "FusedConvBnAct",
        }
    }

    /// Required fan-in.
    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Input { .. } => 0,
            LayerKind::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Weights {
    None,
    Dense(Tensor),
    Sparse(SparseMatrixCsr),
}

impl Weights {
    pub fn is_none(&self) -> bool {
        matches!(self, Weights::None)
    }
    pub fn is_sparse(&self) -> bool {
        matches!(self, Weights::Sparse(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub id: u32,
    pub kind: LayerKind,
    pub weights: Weights,
    pub bias: Option<Vec<f32>>,
    pub bn_params: Option<BnParams>,
}

impl LayerSpec {
    pub fn new(id: u32, kind: LayerKind) -> Self {
        Self { id, kind, weights: Weights::None, bias: None, bn_params: None }
    }

    pub fn with_weights(mut self, w: Weights) -> Self {
        self.weights = w;
        self
    }

    pub fn with_bias(mut self, b: Vec<f32>) -> Self {
        self.bias = Some(b);
        self
    }

    pub fn with_bn(mut self, bn: BnParams) -> Self {
        self.bn_params = Some(bn);
        self
    }
}

/// A violated rule, attributed to a node when one is responsible.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostic {
    pub node: Option<u32>,
    pub rule: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(id) => write!(f, "node {}: {}", id, self.rule),
            None => write!(f, "graph: {}", self.rule),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub nodes: Vec<LayerSpec>,
    pub edges: Vec<(u32, u32)>,
    pub inputs: Vec<u32>,
    pub outputs: Vec<u32>,
}

impl Graph {
    /// Inputs are the Input-kind nodes and outputs the sink nodes, both in
    /// node order; they are derived so persistence stays canonical.
    pub fn new(nodes: Vec<LayerSpec>, edges: Vec<(u32, u32)>) -> Self {
        let mut g = Self { nodes, edges, inputs: Vec::new(), outputs: Vec::new() };
        g.recompute_io();
        g
    }

    pub fn recompute_io(&mut self) {
        self.inputs = self
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::Input { .. }))
            .map(|n| n.id)
            .collect();
        self.outputs = self
            .nodes
            .iter()
            .filter(|n| !self.edges.iter().any(|&(s, _)| s == n.id))
            .map(|n| n.id)
            .collect();
    }

    pub fn node(&self, id: u32) -> Option<&LayerSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: u32) -> Option<&mut LayerSpec> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    /// Predecessors in edge insertion order (significant for Add).
    pub fn preds(&self, id: u32) -> Vec<u32> {
        self.edges.iter().filter(|&&(_, d)| d == id).map(|&(s, _)| s).collect()
    }

    pub fn succs(&self, id: u32) -> Vec<u32> {
        self.edges.iter().filter(|&&(s, _)| s == id).map(|&(_, d)| d).collect()
    }

    pub fn next_id(&self) -> u32 {
        self.nodes.iter().map(|n| n.id).max().map_or(0, |m| m + 1)
    }

    /// Layer count under the declared convention: BatchNorm and interior
    /// Activation nodes are counted as part of the layer they normalize or
    /// activate (they disappear into it at inference-build time); every other
    /// node, including the input and a terminal activation, counts as one
    /// layer.
    pub fn layer_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| match n.kind {
                LayerKind::BatchNorm => false,
                LayerKind::Activation(_) => self.outputs.contains(&n.id),
                _ => true,
            })
            .count()
    }
}

/// Deterministic topological order: Kahn's algorithm with ascending-id
/// tie-breaking.
pub fn topological_order(g: &Graph) -> Result<Vec<u32>> {
    let mut indeg: HashMap<u32, usize> = g.nodes.iter().map(|n| (n.id, 0)).collect();
    for &(_, d) in &g.edges {
        if let Some(e) = indeg.get_mut(&d) {
            *e += 1;
        }
    }
    let mut ready: BinaryHeap<Reverse<u32>> =
        indeg.iter().filter(|&(_, &d)| d == 0).map(|(&id, _)| Reverse(id)).collect();
    let mut order = Vec::with_capacity(g.nodes.len());
    while let Some(Reverse(id)) = ready.pop() {
        order.push(id);
        for s in g.succs(id) {
            let e = indeg.get_mut(&s).expect("edge to unknown node");
            *e -= 1;
            if *e == 0 {
                ready.push(Reverse(s));
            }
        }
    }
    if order.len() != g.nodes.len() {
        return Err(Error::Cycle);
    }
    Ok(order)
}

/// Per-node output shape. FullyConnected flattens everything past the batch
/// axis; 4-D kinds keep NCHW conventions.
pub fn infer_shapes(g: &Graph) -> Result<HashMap<u32, Vec<usize>>> {
    let order = topological_order(g)?;
    let mut shapes: HashMap<u32, Vec<usize>> = HashMap::new();
    for id in order {
        let node = g.node(id).unwrap();
        let pred_shapes: Vec<Vec<usize>> = g
            .preds(id)
            .iter()
            .map(|p| shapes.get(p).cloned().ok_or(Error::Cycle))
            .collect::<Result<_>>()?;
        let shape = node_out_shape(node, &pred_shapes)
            .map_err(|e| Error::Execution { node: id, msg: e.to_string() })?;
        shapes.insert(id, shape);
    }
    Ok(shapes)
}

fn expect_4d(node: &LayerSpec, ins: &[Vec<usize>]) -> Result<Vec<usize>> {
    if ins.len() != node.kind.arity() {
        return Err(Error::Shape(format!(
            "{} expects fan-in {}, got {}",
            node.kind.name(),
            node.kind.arity(),
            ins.len()
        )));
    }
    let s = &ins[0];
    if s.len() != 4 {
        return Err(Error::Shape(format!("{} expects 4-D input, got {:?}", node.kind.name(), s)));
    }
    Ok(s.clone())
}

fn conv_shape(attrs: &ConvAttrs, input: &[usize]) -> Result<Vec<usize>> {
    if input[1] != attrs.in_ch {
        return Err(Error::Shape(format!(
            "input channels {} != weight in_ch {}",
            input[1], attrs.in_ch
        )));
    }
    let ho = conv_out_extent(input[2], attrs.kh, attrs.stride, attrs.padding)
        .ok_or_else(|| Error::Shape("kernel larger than padded input".into()))?;
    let wo = conv_out_extent(input[3], attrs.kw, attrs.stride, attrs.padding)
        .ok_or_else(|| Error::Shape("kernel larger than padded input".into()))?;
    Ok(vec![input[0], attrs.out_ch, ho, wo])
}

pub fn node_out_shape(node: &LayerSpec, ins: &[Vec<usize>]) -> Result<Vec<usize>> {
    match &node.kind {
        LayerKind::Input { dims } => {
            if !ins.is_empty() {
                return Err(Error::Shape("Input node must have fan-in 0".into()));
            }
            Ok(dims.clone())
        }
        LayerKind::Conv2d(attrs) => {
            let s = expect_4d(node, ins)?;
            conv_shape(attrs, &s)
        }
        LayerKind::DepthwiseConv2d { channels, kh, kw, stride, padding } => {
            let s = expect_4d(node, ins)?;
            if s[1] != *channels {
                return Err(Error::Shape(format!(
                    "input channels {} != depthwise channels {}",
                    s[1], channels
                )));
            }
            let attrs = ConvAttrs {
                in_ch: *channels,
                out_ch: *channels,
                kh: *kh,
                kw: *kw,
                stride: *stride,
                padding: *padding,
            };
            conv_shape(&attrs, &s)
        }
        LayerKind::BatchNorm | LayerKind::Activation(_) => {
            if ins.len() != 1 {
                return Err(Error::Shape(format!(
                    "{} expects fan-in 1, got {}",
                    node.kind.name(),
                    ins.len()
                )));
            }
            Ok(ins[0].clone())
        }
        LayerKind::Pool { window, stride, .. } => {
            let s = expect_4d(node, ins)?;
            let ho = conv_out_extent(s[2], *window, *stride, 0)
                .ok_or_else(|| Error::Shape("pool window exceeds input".into()))?;
            let wo = conv_out_extent(s[3], *window, *stride, 0)
                .ok_or_else(|| Error::Shape("pool window exceeds input".into()))?;
            Ok(vec![s[0], s[1], ho, wo])
        }
        LayerKind::FullyConnected { in_dim, out_dim } => {
            if ins.len() != 1 {
                return Err(Error::Shape("FullyConnected expects fan-in 1".into()));
            }
            let s = &ins[0];
            let feat: usize = s[1..].iter().product();
            if feat != *in_dim {
                return Err(Error::Shape(format!(
                    "flattened features {} != in_dim {}",
                    feat, in_dim
                )));
            }
            Ok(vec![s[0], *out_dim])
        }
        LayerKind::Add => {
            if ins.len() != 2 {
                return Err(Error::Shape(format!("Add expects fan-in 2, got {}", ins.len())));
            }
            if ins[0] != ins[1] {
                return Err(Error::Shape(format!(
                    "Add operand shapes differ: {:?} vs {:?}",
                    ins[0], ins[1]
                )));
            }
            Ok(ins[0].clone())
        }
        LayerKind::Gemm { out_rows, inner } => {
            let s = expect_4d(node, ins)?;
            if s[1] != *inner {
                return Err(Error::Shape(format!(
                    "input channels {} != gemm inner {}",
                    s[1], inner
                )));
            }
            Ok(vec![s[0], *out_rows, s[2], s[3]])
        }
        LayerKind::FusedConvBnAct { attrs, .. } => {
            let s = expect_4d(node, ins)?;
            conv_shape(attrs, &s)
        }
    }
}

fn weight_diagnostics(node: &LayerSpec, out: &mut Vec<Diagnostic>) {
    let push = |out: &mut Vec<Diagnostic>, rule: String| {
        out.push(Diagnostic { node: Some(node.id), rule });
    };
    let check_matrix = |out: &mut Vec<Diagnostic>, rows: usize, cols: usize, w: &Weights| match w {
        Weights::None => push(out, "missing weights".into()),
        Weights::Dense(t) => {
            if t.rank() != 2 || t.dims[0] != rows || t.dims[1] != cols {
                push(out, format!("weight dims {:?} != expected {}x{}", t.dims, rows, cols));
            }
        }
        Weights::Sparse(s) => {
            if s.rows != rows || s.cols != cols {
                push(
                    out,
                    format!("sparse weight {}x{} != expected {}x{}", s.rows, s.cols, rows, cols),
                );
            }
            if let Err(e) = s.validate() {
                push(out, format!("invalid CSR weights: {}", e));
            }
        }
    };
    match &node.kind {
        LayerKind::Conv2d(a) | LayerKind::FusedConvBnAct { attrs: a, depthwise: false, .. } => {
            match &node.weights {
                Weights::Dense(t) => {
                    if t.dims != vec![a.out_ch, a.in_ch, a.kh, a.kw] {
                        push(
                            out,
                            format!(
                                "conv weight dims {:?} != ({},{},{},{})",
                                t.dims, a.out_ch, a.in_ch, a.kh, a.kw
                            ),
                        );
                    }
                }
                Weights::Sparse(s) => {
                    if s.rows != a.out_ch || s.cols != a.in_ch * a.kh * a.kw {
                        push(out, "sparse conv weight extents inconsistent with attrs".into());
                    }
                    if let Err(e) = s.validate() {
                        push(out, format!("invalid CSR weights: {}", e));
                    }
                }
                Weights::None => push(out, "missing conv weights".into()),
            }
            if let Some(b) = &node.bias {
                if b.len() != a.out_ch {
                    push(out, format!("bias length {} != out_ch {}", b.len(), a.out_ch));
                }
            }
        }
        LayerKind::DepthwiseConv2d { channels, kh, kw, .. }
        | LayerKind::FusedConvBnAct {
            attrs: ConvAttrs { in_ch: channels, kh, kw, .. },
            depthwise: true,
            ..
        } => match &node.weights {
            Weights::Dense(t) => {
                if t.dims != vec![*channels, 1, *kh, *kw] {
                    push(
                        out,
                        format!("depthwise weight dims {:?} != ({},1,{},{})", t.dims, channels, kh, kw),
                    );
                }
            }
            _ => push(out, "depthwise conv requires dense weights".into()),
        },
        LayerKind::FullyConnected { in_dim, out_dim } => {
            check_matrix(out, *out_dim, *in_dim, &node.weights);
            if let Some(b) = &node.bias {
                if b.len() != *out_dim {
                    push(out, format!("bias length {} != out_dim {}", b.len(), out_dim));
                }
            }
        }
        LayerKind::Gemm { out_rows, inner } => {
            check_matrix(out, *out_rows, *inner, &node.weights);
            if let Some(b) = &node.bias {
                if b.len() != *out_rows {
                    push(out, format!("bias length {} != out_rows {}", b.len(), out_rows));
                }
            }
        }
        LayerKind::BatchNorm => {
            if node.bn_params.is_none() {
                push(out, "BatchNorm node missing bn_params".into());
            }
        }
        _ => {}
    }
    if let Some(bn) = &node.bn_params {
        let c = bn.gamma.len();
        if bn.beta.len() != c || bn.mean.len() != c || bn.var.len() != c {
            push(out, "bn parameter vectors have differing lengths".into());
        }
        if bn.var.iter().any(|&v| v + bn.eps <= 0.0) {
            push(out, "bn var + eps must be positive".into());
        }
    }
}

/// Structural validation; an empty list means every graph invariant holds.
pub fn validate_graph(g: &Graph) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for n in &g.nodes {
        if seen.insert(n.id, ()).is_some() {
            out.push(Diagnostic { node: Some(n.id), rule: "duplicate node id".into() });
        }
    }
    for &(s, d) in &g.edges {
        for id in [s, d] {
            if g.node(id).is_none() {
                out.push(Diagnostic { node: Some(id), rule: "edge references unknown node".into() });
            }
        }
    }
    if !out.is_empty() {
        return out;
    }
    for n in &g.nodes {
        let fan_in = g.preds(n.id).len();
        if fan_in != n.kind.arity() {
            out.push(Diagnostic {
                node: Some(n.id),
                rule: format!("{} requires fan-in {}, has {}", n.kind.name(), n.kind.arity(), fan_in),
            });
        }
        weight_diagnostics(n, &mut out);
    }
    match topological_order(g) {
        Err(_) => out.push(Diagnostic { node: None, rule: "graph contains a cycle".into() }),
        Ok(_) => {
            if out.is_empty() {
                if let Err(e) = infer_shapes(g) {
                    let (node, rule) = match e {
                        Error::Execution { node, msg } => (Some(node), msg),
                        other => (None, other.to_string()),
                    };
                    out.push(Diagnostic { node, rule: format!("shape inference failed: {}", rule) });
                }
            }
        }
    }
    out
}

pub use crate::reference::{build_reference_graph, ReferenceModel};
