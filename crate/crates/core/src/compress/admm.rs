//! ADMM weight compression in scaled form. The x-update trains the net with
//! a quadratic pull toward the projected auxiliary variable, the z-update is
//! a Euclidean projection onto the constraint set, and the dual u accumulates
//! the residual. Masked retraining then hardens the constraint bit-exactly.

use crate::error::{Error, Result};
use crate::graph::{ActKind, Graph, LayerKind, LayerSpec, Weights};
use crate::mnist::Dataset;
use crate::sparse::csr_from_dense;
use crate::tensor::{Layout, Tensor};

use super::net::{accuracy, Momentum, SgdOptions, TrainLayer, TrainableNet};
use super::net::run_epoch;
use super::projection::{project_quantization, project_sparsity, quant_levels, support_mask};

/// Per parameterized layer: maximum nonzero count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneSpec {
    pub retain_k: Vec<usize>,
}

impl PruneSpec {
    /// Uniform retention fraction across all parameterized layers.
    pub fn uniform(net: &TrainableNet, keep_fraction: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&keep_fraction) || keep_fraction == 0.0 {
            return Err(Error::Parameter(format!(
                "keep fraction {} outside (0, 1]",
                keep_fraction
            )));
        }
        let retain_k = net
            .layers
            .iter()
            .filter_map(|l| l.weights())
            .map(|w| ((w.len() as f64 * keep_fraction as f64).round() as usize).clamp(1, w.len()))
            .collect();
        Ok(Self { retain_k })
    }

    pub fn validate(&self, net: &TrainableNet) -> Result<()> {
        let sizes: Vec<usize> =
            net.layers.iter().filter_map(|l| l.weights().map(|w| w.len())).collect();
        if sizes.len() != self.retain_k.len() {
            return Err(Error::Parameter(format!(
                "{} retain counts for {} parameterized layers",
                self.retain_k.len(),
                sizes.len()
            )));
        }
        for (i, (&k, &n)) in self.retain_k.iter().zip(&sizes).enumerate() {
            if k == 0 || k > n {
                return Err(Error::Parameter(format!(
                    "layer {}: retain_k {} outside 1..={}",
                    i, k, n
                )));
            }
        }
        Ok(())
    }
}

/// Per parameterized layer: the permitted value grid.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantSpec {
    pub bits: u8,
    pub levels: Vec<Vec<f32>>,
}

impl QuantSpec {
    /// Symmetric uniform grids derived from each layer's current max |w|.
    pub fn uniform(net: &TrainableNet, bits: u8) -> Result<Self> {
        let mut levels = Vec::new();
        for l in &net.layers {
            if let Some(w) = l.weights() {
                levels.push(quant_levels(w, bits)?);
            }
        }
        Ok(Self { bits, levels })
    }

    pub fn validate(&self, net: &TrainableNet) -> Result<()> {
        let n = net.layers.iter().filter(|l| l.weights().is_some()).count();
        if n != self.levels.len() {
            return Err(Error::Parameter(format!(
                "{} level sets for {} parameterized layers",
                self.levels.len(),
                n
            )));
        }
        for (i, ls) in self.levels.iter().enumerate() {
            if ls.is_empty() {
                return Err(Error::Parameter(format!("layer {}: empty level set", i)));
            }
            if ls.windows(2).any(|p| p[0] >= p[1]) {
                return Err(Error::Parameter(format!("layer {}: levels not ascending", i)));
            }
        }
        Ok(())
    }
}

/// The constraint set the z-update projects onto.
#[derive(Clone, Debug)]
pub enum ConstraintSpec {
    Prune(PruneSpec),
    Quant(QuantSpec),
}

impl ConstraintSpec {
    pub fn validate(&self, net: &TrainableNet) -> Result<()> {
        match self {
            ConstraintSpec::Prune(p) => p.validate(net),
            ConstraintSpec::Quant(q) => q.validate(net),
        }
    }

    fn project(&self, layer: usize, v: &[f32]) -> Result<Vec<f32>> {
        match self {
            ConstraintSpec::Prune(p) => project_sparsity(v, p.retain_k[layer]),
            ConstraintSpec::Quant(q) => project_quantization(v, &q.levels[layer]),
        }
    }
}

/// Auxiliary and dual variables, one pair per parameterized layer.
#[derive(Clone, Debug)]
pub struct AdmmState {
    pub z: Vec<Vec<f32>>,
    pub u: Vec<Vec<f32>>,
    pub rho: f32,
}

/// One outer-iteration record.
#[derive(Clone, Copy, Debug)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub loss: f32,
    pub residual: f32,
    pub accuracy: Option<f32>,
}

/// Outer-loop schedule: rho starts at `rho0` and multiplies by `rho_factor`
/// after each stage of `iters_per_stage` outer iterations; every x-update is
/// `epochs` SGD epochs.
#[derive(Clone, Debug)]
pub struct AdmmSchedule {
    pub rho0: f32,
    pub rho_factor: f32,
    pub stages: usize,
    pub iters_per_stage: usize,
    pub epochs: usize,
    pub sgd: SgdOptions,
    pub seed: u64,
}

impl Default for AdmmSchedule {
    fn default() -> Self {
        Self {
            rho0: 1e-3,
            rho_factor: 10.0,
            stages: 3,
            iters_per_stage: 1,
            epochs: 5,
            sgd: SgdOptions::default(),
            seed: 0,
        }
    }
}

impl AdmmSchedule {
    fn validate(&self) -> Result<()> {
        if self.rho0 <= 0.0 || self.rho_factor <= 0.0 {
            return Err(Error::Parameter("rho schedule must be positive".into()));
        }
        if self.stages == 0 || self.iters_per_stage == 0 || self.epochs == 0 {
            return Err(Error::Parameter("schedule counts must be nonzero".into()));
        }
        Ok(())
    }
}

fn weight_vectors(net: &TrainableNet) -> Vec<Vec<f32>> {
    net.layers.iter().filter_map(|l| l.weights().map(|w| w.to_vec())).collect()
}

fn residual_norm(net: &TrainableNet, z: &[Vec<f32>]) -> f32 {
    let mut acc = 0.0f64;
    for (x, zl) in weight_vectors(net).iter().zip(z) {
        for (a, b) in x.iter().zip(zl) {
            let d = (a - b) as f64;
            acc += d * d;
        }
    }
    acc.sqrt() as f32
}

/// Run scaled-form ADMM. Each outer iteration performs the x-update (SGD on
/// loss + (rho/2)||x - z + u||^2), the z-update (projection of x + u), and
/// the dual update u += x - z. `eval` adds held-out accuracy to the history.
pub fn admm_compress(
    net: &mut TrainableNet,
    spec: &ConstraintSpec,
    train: &Dataset,
    schedule: &AdmmSchedule,
    eval: Option<&Dataset>,
) -> Result<(AdmmState, Vec<HistoryEntry>)> {
    spec.validate(net)?;
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::Parameter("empty training set".into()));
    }

    let x0 = weight_vectors(net);
    let mut z: Vec<Vec<f32>> = Vec::with_capacity(x0.len());
    for (li, x) in x0.iter().enumerate() {
        z.push(spec.project(li, x)?);
    }
    let mut u: Vec<Vec<f32>> = x0.iter().map(|x| vec![0.0; x.len()]).collect();

    let mut momentum = Momentum::new(net);
    let mut history = Vec::new();
    let mut rho = schedule.rho0;
    let mut iteration = 0usize;
    let mut epoch_counter = 0usize;

    for _stage in 0..schedule.stages {
        for _ in 0..schedule.iters_per_stage {
            // x-update: E epochs of SGD with the quadratic penalty gradient
            let mut last_loss = 0.0f32;
            for _ in 0..schedule.epochs {
                let zs = &z;
                let us = &u;
                let hook = move |pi: usize, w: &[f32]| -> Vec<f32> {
                    w.iter()
                        .zip(&zs[pi])
                        .zip(&us[pi])
                        .map(|((&x, &zv), &uv)| rho * (x - zv + uv))
                        .collect()
                };
                last_loss = run_epoch(
                    net,
                    &mut momentum,
                    train,
                    &schedule.sgd,
                    schedule.seed,
                    epoch_counter,
                    Some(&hook),
                    None,
                )
                .map_err(|e| match e {
                    Error::Diverged(_) => Error::Diverged(iteration),
                    other => other,
                })?;
                epoch_counter += 1;
            }

            // z-update then dual update
            let x = weight_vectors(net);
            for li in 0..x.len() {
                let shifted: Vec<f32> =
                    x[li].iter().zip(&u[li]).map(|(&xi, &ui)| xi + ui).collect();
                z[li] = spec.project(li, &shifted)?;
                for i in 0..u[li].len() {
                    u[li][i] += x[li][i] - z[li][i];
                }
            }

            let acc = match eval {
                Some(ds) => Some(accuracy(net, ds)?),
                None => None,
            };
            history.push(HistoryEntry {
                iteration,
                loss: last_loss,
                residual: residual_norm(net, &z),
                accuracy: acc,
            });
            iteration += 1;
        }
        rho *= schedule.rho_factor;
    }

    Ok((AdmmState { z, u, rho }, history))
}

/// Harden the constraint and fine-tune. Pruning keeps x on z's support with
/// pruned entries held at exactly 0.0; quantization snaps x to z (the
/// codebook values) and retrains biases only.
pub fn masked_retrain(
    net: &mut TrainableNet,
    state: &AdmmState,
    spec: &ConstraintSpec,
    train: &Dataset,
    epochs: usize,
    opts: &SgdOptions,
    seed: u64,
) -> Result<()> {
    spec.validate(net)?;
    let param_idx = net.param_layer_indices();
    if param_idx.len() != state.z.len() {
        return Err(Error::Parameter("ADMM state does not match net layout".into()));
    }

    let masks: Vec<Option<Vec<bool>>> = match spec {
        ConstraintSpec::Prune(_) => {
            // zero outside z's support, then freeze those entries
            let mut masks = Vec::new();
            for (pi, &li) in param_idx.iter().enumerate() {
                let mask = support_mask(&state.z[pi]);
                let w = net.layers[li].weights_mut().unwrap();
                for (wi, &keep) in w.iter_mut().zip(&mask) {
                    if !keep {
                        *wi = 0.0;
                    }
                }
                masks.push(Some(mask));
            }
            masks
        }
        ConstraintSpec::Quant(_) => {
            // snap to the codebook and freeze every weight
            for (pi, &li) in param_idx.iter().enumerate() {
                let w = net.layers[li].weights_mut().unwrap();
                w.copy_from_slice(&state.z[pi]);
            }
            param_idx.iter().map(|&li| {
                Some(vec![false; net.layers[li].weights().unwrap().len()])
            }).collect()
        }
    };

    let mut momentum = Momentum::new(net);
    for epoch in 0..epochs {
        run_epoch(net, &mut momentum, train, opts, seed, epoch, None, Some(&masks))?;
    }
    Ok(())
}

/// Progressive pruning: each stage runs admm_compress + masked_retrain,
/// initialized from the previous stage's result. Stages must be monotonically
/// tighter (retain_k non-increasing per layer).
pub fn progressive_compress(
    net: &mut TrainableNet,
    stages: &[PruneSpec],
    train: &Dataset,
    schedule: &AdmmSchedule,
    retrain_epochs: usize,
    eval: Option<&Dataset>,
) -> Result<Vec<Vec<HistoryEntry>>> {
    if stages.is_empty() {
        return Err(Error::Parameter("no compression stages".into()));
    }
    for pair in stages.windows(2) {
        if pair[0].retain_k.len() != pair[1].retain_k.len() {
            return Err(Error::Parameter("stages cover differing layer counts".into()));
        }
        if pair[0].retain_k.iter().zip(&pair[1].retain_k).any(|(a, b)| b > a) {
            return Err(Error::Parameter(
                "stages must be monotonically tighter (retain_k non-increasing)".into(),
            ));
        }
    }
    let mut histories = Vec::with_capacity(stages.len());
    for stage in stages {
        let spec = ConstraintSpec::Prune(stage.clone());
        let (state, history) = admm_compress(net, &spec, train, schedule, eval)?;
        masked_retrain(net, &state, &spec, train, retrain_epochs, &schedule.sgd, schedule.seed)?;
        histories.push(history);
    }
    Ok(histories)
}

/// Nonzero fraction threshold below which exported weights go CSR.
const SPARSE_EXPORT_THRESHOLD: f64 = 0.5;

/// Lower a trainable net to the inference graph. FC and conv weights at
/// >=50% sparsity are stored CSR; conv CSR rows are (out_ch, in_ch*kh*kw).
/// With a `spec`, layers whose nonzero count exceeds retain_k are rejected.
pub fn export_compressed(net: &TrainableNet, spec: Option<&PruneSpec>) -> Result<Graph> {
    if let Some(p) = spec {
        p.validate(net)?;
        let mut pi = 0usize;
        for l in &net.layers {
            if let Some(w) = l.weights() {
                let nnz = w.iter().filter(|&&v| v != 0.0).count();
                if nnz > p.retain_k[pi] {
                    return Err(Error::Infeasible(format!(
                        "layer {}: {} nonzeros exceed retain_k {}",
                        pi, nnz, p.retain_k[pi]
                    )));
                }
                pi += 1;
            }
        }
    }

    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let [c, h, w] = net.input_dims;
    nodes.push(LayerSpec::new(0, LayerKind::Input { dims: vec![1, c, h, w] }));
    let mut prev = 0u32;
    let mut next_id = 1u32;

    for layer in &net.layers {
        let node = match layer {
            TrainLayer::Flatten => continue, // FullyConnected flattens implicitly
            TrainLayer::Relu => {
                LayerSpec::new(next_id, LayerKind::Activation(ActKind::Relu))
            }
            TrainLayer::Fc { in_dim, out_dim, w, b } => {
                let weights = pack_weights(w, *out_dim, *in_dim, Layout::RowMajor2d)?;
                LayerSpec::new(
                    next_id,
                    LayerKind::FullyConnected { in_dim: *in_dim, out_dim: *out_dim },
                )
                .with_weights(weights)
                .with_bias(b.clone())
            }
            TrainLayer::Conv2d { attrs, w, b } => {
                let cols = attrs.in_ch * attrs.kh * attrs.kw;
                let weights = if sparsity_of(w) >= SPARSE_EXPORT_THRESHOLD {
                    let m = Tensor::matrix(attrs.out_ch, cols, w.clone())?;
                    Weights::Sparse(csr_from_dense(&m)?)
                } else {
                    Weights::Dense(Tensor::new(
                        vec![attrs.out_ch, attrs.in_ch, attrs.kh, attrs.kw],
                        Layout::Nchw,
                        w.clone(),
                    )?)
                };
                LayerSpec::new(next_id, LayerKind::Conv2d(*attrs))
                    .with_weights(weights)
                    .with_bias(b.clone())
            }
        };
        edges.push((prev, next_id));
        prev = next_id;
        next_id += 1;
        nodes.push(node);
    }
    Ok(Graph::new(nodes, edges))
}

/// Inverse of export_compressed for linear-chain models: rebuild a trainable
/// net from an Input -> (FC | Conv2d | Activation)* graph. Sparse weights are
/// densified; exact zeros survive, so feasibility is preserved.
pub fn net_from_graph(g: &Graph, num_classes: usize) -> Result<TrainableNet> {
    let order = crate::graph::topological_order(g)?;
    let mut input_dims: Option<[usize; 3]> = None;
    let mut layers = Vec::new();
    let mut flattened = false;
    for id in order {
        let node = g.node(id).unwrap();
        match &node.kind {
            LayerKind::Input { dims } => {
                if dims.len() != 4 {
                    return Err(Error::Unsupported(format!(
                        "trainable import needs a 4-D input, got {:?}",
                        dims
                    )));
                }
                input_dims = Some([dims[1], dims[2], dims[3]]);
            }
            LayerKind::FullyConnected { in_dim, out_dim } => {
                if !flattened {
                    layers.push(TrainLayer::Flatten);
                    flattened = true;
                }
                let w = densify(&node.weights, *out_dim, *in_dim)?;
                let b = node.bias.clone().unwrap_or_else(|| vec![0.0; *out_dim]);
                layers.push(TrainLayer::Fc { in_dim: *in_dim, out_dim: *out_dim, w, b });
            }
            LayerKind::Conv2d(attrs) => {
                let cols = attrs.in_ch * attrs.kh * attrs.kw;
                let w = densify(&node.weights, attrs.out_ch, cols)?;
                let b = node.bias.clone().unwrap_or_else(|| vec![0.0; attrs.out_ch]);
                layers.push(TrainLayer::Conv2d { attrs: *attrs, w, b });
            }
            LayerKind::Activation(ActKind::Relu) => layers.push(TrainLayer::Relu),
            LayerKind::Activation(ActKind::Identity) => {}
            other => {
                return Err(Error::Unsupported(format!(
                    "trainable import does not handle {} nodes",
                    other.name()
                )))
            }
        }
    }
    let input_dims =
        input_dims.ok_or_else(|| Error::Unsupported("graph has no Input node".into()))?;
    Ok(TrainableNet { layers, input_dims, num_classes })
}

fn densify(w: &Weights, rows: usize, cols: usize) -> Result<Vec<f32>> {
    match w {
        Weights::Dense(t) => {
            if t.data.len() != rows * cols {
                return Err(Error::Shape(format!(
                    "weight tensor {:?} != expected {}x{}",
                    t.dims, rows, cols
                )));
            }
            Ok(t.data.clone())
        }
        Weights::Sparse(s) => {
            if s.rows != rows || s.cols != cols {
                return Err(Error::Shape(format!(
                    "sparse weight {}x{} != expected {}x{}",
                    s.rows, s.cols, rows, cols
                )));
            }
            Ok(crate::sparse::csr_to_dense(s)?.data)
        }
        Weights::None => Err(Error::Shape("parameterized node has no weights".into())),
    }
}

fn sparsity_of(w: &[f32]) -> f64 {
    let nnz = w.iter().filter(|&&v| v != 0.0).count();
    1.0 - nnz as f64 / w.len() as f64
}

fn pack_weights(w: &[f32], rows: usize, cols: usize, layout: Layout) -> Result<Weights> {
    if sparsity_of(w) >= SPARSE_EXPORT_THRESHOLD {
        let m = Tensor::matrix(rows, cols, w.to_vec())?;
        Ok(Weights::Sparse(csr_from_dense(&m)?))
    } else {
        Ok(Weights::Dense(Tensor::new(vec![rows, cols], layout, w.to_vec())?))
    }
}
