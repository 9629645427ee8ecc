//! Self-contained trainable nets (MLP / small CNN) with analytic gradients
//! and deterministic seeded SGD. This is the loss function the ADMM
//! regularizer wraps; it deliberately stays independent of the inference
//! engine so exported models can be checked against an unrelated code path.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{gemm_tiled, KernelConfig};
use crate::error::{Error, Result};
use crate::graph::ConvAttrs;
use crate::mnist::Dataset;
use crate::tensor::{conv_out_extent, Layout, Tensor};

#[derive(Clone, Debug)]
pub enum TrainLayer {
    /// w is (out_dim, in_dim) row-major; activations flow as (dim, batch).
    Fc { in_dim: usize, out_dim: usize, w: Vec<f32>, b: Vec<f32> },
    /// w is (K, C, kh, kw); activations flow as NCHW.
    Conv2d { attrs: ConvAttrs, w: Vec<f32>, b: Vec<f32> },
    Relu,
    Flatten,
}

impl TrainLayer {
    pub fn weights(&self) -> Option<&[f32]> {
        match self {
            TrainLayer::Fc { w, .. } | TrainLayer::Conv2d { w, .. } => Some(w),
            _ => None,
        }
    }

    pub fn weights_mut(&mut self) -> Option<&mut Vec<f32>> {
        match self {
            TrainLayer::Fc { w, .. } | TrainLayer::Conv2d { w, .. } => Some(w),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainableNet {
    pub layers: Vec<TrainLayer>,
    /// Per-sample input dims as (C, H, W).
    pub input_dims: [usize; 3],
    pub num_classes: usize,
}

/// Gradients for one parameterized layer.
#[derive(Clone, Debug, Default)]
pub struct ParamGrad {
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
}

impl TrainableNet {
    /// 784-300-100-10 MLP, He-initialized from the seed.
    pub fn lenet_300_100(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = vec![TrainLayer::Flatten];
        for (i, o) in [(784usize, 300usize), (300, 100), (100, 10)] {
            layers.push(fc_init(&mut rng, i, o));
            if o != 10 {
                layers.push(TrainLayer::Relu);
            }
        }
        Self { layers, input_dims: [1, 28, 28], num_classes: 10 }
    }

    /// Indices (into `layers`) of the parameterized layers, in order.
    pub fn param_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.weights().is_some())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().filter_map(|l| l.weights().map(|w| w.len())).sum()
    }

    pub fn nonzero_weight_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.weights().map(|w| w.iter().filter(|&&v| v != 0.0).count()))
            .sum()
    }
}

fn fc_init(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> TrainLayer {
    let scale = (2.0 / in_dim as f32).sqrt();
    let w = (0..out_dim * in_dim).map(|_| rng.random_range(-scale..scale)).collect();
    TrainLayer::Fc { in_dim, out_dim, w, b: vec![0.0; out_dim] }
}

pub fn conv_init(rng: &mut ChaCha8Rng, attrs: ConvAttrs) -> TrainLayer {
    let fan_in = attrs.in_ch * attrs.kh * attrs.kw;
    let scale = (2.0 / fan_in as f32).sqrt();
    let w = (0..attrs.out_ch * fan_in).map(|_| rng.random_range(-scale..scale)).collect();
    TrainLayer::Conv2d { attrs, w, b: vec![0.0; attrs.out_ch] }
}

/// Activations between layers: feature maps or (features, batch) matrices.
#[derive(Clone, Debug)]
enum Act {
    Img(Tensor),
    Mat(Tensor),
}

impl Act {
    fn data(&self) -> &[f32] {
        match self {
            Act::Img(t) | Act::Mat(t) => &t.data,
        }
    }
}

fn transpose(m: &Tensor) -> Tensor {
    let (r, c) = (m.dims[0], m.dims[1]);
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = m.data[i * c + j];
        }
    }
    Tensor::matrix(c, r, out).unwrap()
}

fn batch_to_nchw(images: &[f32], dims: [usize; 3], batch: usize) -> Tensor {
    Tensor::new(vec![batch, dims[0], dims[1], dims[2]], Layout::Nchw, images.to_vec()).unwrap()
}

/// Mean cross-entropy loss and analytic gradients for every parameter.
pub fn forward_backward(
    net: &TrainableNet,
    images: &[f32],
    labels: &[u8],
    batch: usize,
) -> Result<(f32, Vec<Option<ParamGrad>>)> {
    let sample = net.input_dims.iter().product::<usize>();
    if images.len() != batch * sample {
        return Err(Error::Shape(format!(
            "batch of {} expects {} pixels, got {}",
            batch,
            batch * sample,
            images.len()
        )));
    }
    if labels.len() != batch {
        return Err(Error::Shape("label count != batch".into()));
    }
    if labels.iter().any(|&l| l as usize >= net.num_classes) {
        return Err(Error::Parameter("label out of class range".into()));
    }
    let cfg = KernelConfig::default();

    // forward, keeping each layer's input
    let mut acts: Vec<Act> = Vec::with_capacity(net.layers.len() + 1);
    acts.push(Act::Img(batch_to_nchw(images, net.input_dims, batch)));
    for layer in &net.layers {
        let next = match (layer, acts.last().unwrap()) {
            (TrainLayer::Flatten, Act::Img(t)) => {
                // NCHW (B, feat) rows -> (feat, B) columns
                let feat: usize = t.dims[1..].iter().product();
                let flat = Tensor::matrix(batch, feat, t.data.clone())?;
                Act::Mat(transpose(&flat))
            }
            (TrainLayer::Fc { in_dim, out_dim, w, b }, Act::Mat(a)) => {
                if a.dims[0] != *in_dim {
                    return Err(Error::Shape(format!(
                        "fc expects {} features, got {}",
                        in_dim, a.dims[0]
                    )));
                }
                let wm = Tensor::matrix(*out_dim, *in_dim, w.clone())?;
                let mut y = gemm_tiled(&wm, a, &cfg)?;
                for o in 0..*out_dim {
                    for v in &mut y.data[o * batch..(o + 1) * batch] {
                        *v += b[o];
                    }
                }
                Act::Mat(y)
            }
            (TrainLayer::Conv2d { attrs, w, b }, Act::Img(x)) => {
                let wt = Tensor::new(
                    vec![attrs.out_ch, attrs.in_ch, attrs.kh, attrs.kw],
                    Layout::Nchw,
                    w.clone(),
                )?;
                Act::Img(crate::engine::conv2d_direct(x, &wt, Some(b), attrs.stride, attrs.padding)?)
            }
            (TrainLayer::Relu, Act::Mat(t)) => {
                let mut o = t.clone();
                for v in &mut o.data {
                    *v = v.max(0.0);
                }
                Act::Mat(o)
            }
            (TrainLayer::Relu, Act::Img(t)) => {
                let mut o = t.clone();
                for v in &mut o.data {
                    *v = v.max(0.0);
                }
                Act::Img(o)
            }
            (l, _) => {
                return Err(Error::Shape(format!(
                    "layer {:?} incompatible with activation kind",
                    std::mem::discriminant(l)
                )))
            }
        };
        acts.push(next);
    }

    // softmax cross-entropy head over (classes, batch) logits
    let logits = match acts.last().unwrap() {
        Act::Mat(t) => t,
        Act::Img(_) => return Err(Error::Shape("net must end in a matrix of logits".into())),
    };
    if logits.dims[0] != net.num_classes {
        return Err(Error::Shape(format!(
            "{} logit rows != {} classes",
            logits.dims[0], net.num_classes
        )));
    }
    let classes = net.num_classes;
    let mut loss = 0.0f64;
    let mut dlogits = vec![0.0f32; classes * batch];
    for bi in 0..batch {
        let mut maxv = f32::NEG_INFINITY;
        for c in 0..classes {
            maxv = maxv.max(logits.data[c * batch + bi]);
        }
        let mut denom = 0.0f32;
        for c in 0..classes {
            denom += (logits.data[c * batch + bi] - maxv).exp();
        }
        let label = labels[bi] as usize;
        let logp = logits.data[label * batch + bi] - maxv - denom.ln();
        loss -= logp as f64;
        for c in 0..classes {
            let p = (logits.data[c * batch + bi] - maxv).exp() / denom;
            let target = if c == label { 1.0 } else { 0.0 };
            dlogits[c * batch + bi] = (p - target) / batch as f32;
        }
    }
    let loss = (loss / batch as f64) as f32;

    // backward
    let mut grads: Vec<Option<ParamGrad>> = vec![None; net.layers.len()];
    let mut delta = Act::Mat(Tensor::matrix(classes, batch, dlogits)?);
    for (li, layer) in net.layers.iter().enumerate().rev() {
        let input = &acts[li];
        delta = match (layer, &delta) {
            (TrainLayer::Fc { in_dim, out_dim, w, .. }, Act::Mat(dy)) => {
                let a = match input {
                    Act::Mat(t) => t,
                    _ => unreachable!(),
                };
                let at = transpose(a);
                let wm = Tensor::matrix(*out_dim, *in_dim, w.clone())?;
                let dw = gemm_tiled(dy, &at, &cfg)?;
                let mut db = vec![0.0f32; *out_dim];
                for o in 0..*out_dim {
                    db[o] = dy.data[o * batch..(o + 1) * batch].iter().sum();
                }
                grads[li] = Some(ParamGrad { dw: dw.data, db });
                let wt = transpose(&wm);
                Act::Mat(gemm_tiled(&wt, dy, &cfg)?)
            }
            (TrainLayer::Conv2d { attrs, w, .. }, Act::Img(dy)) => {
                let x = match input {
                    Act::Img(t) => t,
                    _ => unreachable!(),
                };
                let (dw, db, dx) = conv2d_backward(x, w, attrs, dy)?;
                grads[li] = Some(ParamGrad { dw, db });
                Act::Img(dx)
            }
            (TrainLayer::Relu, d) => {
                let x = input.data();
                match d {
                    Act::Mat(t) => {
                        let mut o = t.clone();
                        for (v, &xi) in o.data.iter_mut().zip(x) {
                            if xi <= 0.0 {
                                *v = 0.0;
                            }
                        }
                        Act::Mat(o)
                    }
                    Act::Img(t) => {
                        let mut o = t.clone();
                        for (v, &xi) in o.data.iter_mut().zip(x) {
                            if xi <= 0.0 {
                                *v = 0.0;
                            }
                        }
                        Act::Img(o)
                    }
                }
            }
            (TrainLayer::Flatten, Act::Mat(d)) => {
                let x = match input {
                    Act::Img(t) => t,
                    _ => unreachable!(),
                };
                let dt = transpose(d); // (B, feat)
                Act::Img(Tensor::new(x.dims.clone(), Layout::Nchw, dt.data)?)
            }
            _ => return Err(Error::Shape("backward pass shape mismatch".into())),
        };
    }
    Ok((loss, grads))
}

fn conv2d_backward(
    x: &Tensor,
    w: &[f32],
    attrs: &ConvAttrs,
    dy: &Tensor,
) -> Result<(Vec<f32>, Vec<f32>, Tensor)> {
    let (n, c, h, wd) = (x.dims[0], x.dims[1], x.dims[2], x.dims[3]);
    let (kout, kh, kw) = (attrs.out_ch, attrs.kh, attrs.kw);
    let ho = conv_out_extent(h, kh, attrs.stride, attrs.padding).unwrap();
    let wo = conv_out_extent(wd, kw, attrs.stride, attrs.padding).unwrap();
    let mut dwv = vec![0.0f32; kout * c * kh * kw];
    let mut db = vec![0.0f32; kout];
    let mut dx = Tensor::zeros(x.dims.clone(), Layout::Nchw);
    for ni in 0..n {
        for ko in 0..kout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = dy.at4(ni, ko, oy, ox);
                    db[ko] += g;
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * attrs.stride + ky) as isize - attrs.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * attrs.stride + kx) as isize - attrs.padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let widx = ((ko * c + ci) * kh + ky) * kw + kx;
                                let xoff = x.offset4(ni, ci, iy as usize, ix as usize);
                                dwv[widx] += g * x.data[xoff];
                                dx.data[xoff] += g * w[widx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dwv, db, dx))
}

/// SGD with momentum; `grad_hook` may add an extra per-weight gradient term
/// (the ADMM penalty) and `mask` freezes entries at exactly zero update.
#[derive(Clone, Debug)]
pub struct SgdOptions {
    pub lr: f32,
    pub momentum: f32,
    pub batch: usize,
}

impl Default for SgdOptions {
    fn default() -> Self {
        Self { lr: 0.1, momentum: 0.9, batch: 64 }
    }
}

pub(crate) struct Momentum {
    vw: Vec<Vec<f32>>,
    vb: Vec<Vec<f32>>,
}

impl Momentum {
    pub fn new(net: &TrainableNet) -> Self {
        let mut vw = Vec::new();
        let mut vb = Vec::new();
        for l in &net.layers {
            match l {
                TrainLayer::Fc { w, b, .. } | TrainLayer::Conv2d { w, b, .. } => {
                    vw.push(vec![0.0; w.len()]);
                    vb.push(vec![0.0; b.len()]);
                }
                _ => {
                    vw.push(Vec::new());
                    vb.push(Vec::new());
                }
            }
        }
        Self { vw, vb }
    }

    pub fn step(
        &mut self,
        net: &mut TrainableNet,
        grads: &[Option<ParamGrad>],
        opts: &SgdOptions,
        weight_extra: Option<&dyn Fn(usize, &[f32]) -> Vec<f32>>,
        masks: Option<&[Option<Vec<bool>>]>,
    ) {
        let mut pi = 0usize;
        for (li, layer) in net.layers.iter_mut().enumerate() {
            let Some(g) = &grads[li] else { continue };
            let (w, b) = match layer {
                TrainLayer::Fc { w, b, .. } | TrainLayer::Conv2d { w, b, .. } => (w, b),
                _ => unreachable!(),
            };
            let extra = weight_extra.map(|f| f(pi, w));
            let mask = masks.and_then(|m| m[pi].as_ref());
            let vw = &mut self.vw[li];
            for i in 0..w.len() {
                if let Some(m) = mask {
                    // frozen entries keep their exact value (0.0 for pruned,
                    // the codebook level for quantized)
                    if !m[i] {
                        vw[i] = 0.0;
                        continue;
                    }
                }
                let mut grad = g.dw[i];
                if let Some(e) = &extra {
                    grad += e[i];
                }
                vw[i] = opts.momentum * vw[i] + grad;
                w[i] -= opts.lr * vw[i];
            }
            let vb = &mut self.vb[li];
            for i in 0..b.len() {
                vb[i] = opts.momentum * vb[i] + g.db[i];
                b[i] -= opts.lr * vb[i];
            }
            pi += 1;
        }
    }
}

/// Deterministic epoch order from (seed, epoch).
pub(crate) fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

pub(crate) fn gather_batch(ds: &Dataset, idx: &[usize]) -> (Vec<f32>, Vec<u8>) {
    let len = ds.sample_len();
    let mut images = Vec::with_capacity(idx.len() * len);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        images.extend_from_slice(ds.image(i));
        labels.push(ds.labels[i]);
    }
    (images, labels)
}

/// One SGD epoch; returns the mean per-batch loss. The ADMM path passes a
/// penalty hook and the masked-retrain path passes support masks.
pub(crate) fn run_epoch(
    net: &mut TrainableNet,
    momentum: &mut Momentum,
    ds: &Dataset,
    opts: &SgdOptions,
    seed: u64,
    epoch: usize,
    weight_extra: Option<&dyn Fn(usize, &[f32]) -> Vec<f32>>,
    masks: Option<&[Option<Vec<bool>>]>,
) -> Result<f32> {
    let order = shuffled_indices(ds.len(), seed, epoch);
    let mut total = 0.0f64;
    let mut batches = 0usize;
    for chunk in order.chunks(opts.batch) {
        let (images, labels) = gather_batch(ds, chunk);
        let (loss, grads) = forward_backward(net, &images, &labels, chunk.len())?;
        if !loss.is_finite() {
            return Err(Error::Diverged(epoch));
        }
        momentum.step(net, &grads, opts, weight_extra, masks);
        total += loss as f64;
        batches += 1;
    }
    Ok((total / batches.max(1) as f64) as f32)
}

/// Plain SGD training; bit-deterministic for a fixed seed. Returns held-out
/// accuracy on `test`.
pub fn train_dense(
    net: &mut TrainableNet,
    train: &Dataset,
    test: &Dataset,
    epochs: usize,
    opts: &SgdOptions,
    seed: u64,
) -> Result<f32> {
    if train.is_empty() {
        return Err(Error::Parameter("empty training set".into()));
    }
    let mut momentum = Momentum::new(net);
    for epoch in 0..epochs {
        run_epoch(net, &mut momentum, train, opts, seed, epoch, None, None)?;
    }
    accuracy(net, test)
}

/// Argmax prediction for one sample.
pub fn predict(net: &TrainableNet, image: &[f32]) -> Result<usize> {
    logits_for(net, image).map(|l| argmax(&l))
}

/// Raw logits for one sample (engine-independent forward pass).
pub fn logits_for(net: &TrainableNet, image: &[f32]) -> Result<Vec<f32>> {
    let (_, logits) = forward_logits(net, image, 1)?;
    Ok(logits)
}

fn forward_logits(net: &TrainableNet, images: &[f32], batch: usize) -> Result<(usize, Vec<f32>)> {
    let cfg = KernelConfig::default();
    let mut act = Act::Img(batch_to_nchw(images, net.input_dims, batch));
    for layer in &net.layers {
        act = match (layer, &act) {
            (TrainLayer::Flatten, Act::Img(t)) => {
                let feat: usize = t.dims[1..].iter().product();
                let flat = Tensor::matrix(batch, feat, t.data.clone())?;
                Act::Mat(transpose(&flat))
            }
            (TrainLayer::Fc { in_dim, out_dim, w, b }, Act::Mat(a)) => {
                let wm = Tensor::matrix(*out_dim, *in_dim, w.clone())?;
                let mut y = gemm_tiled(&wm, a, &cfg)?;
                for o in 0..*out_dim {
                    for v in &mut y.data[o * batch..(o + 1) * batch] {
                        *v += b[o];
                    }
                }
                Act::Mat(y)
            }
            (TrainLayer::Conv2d { attrs, w, b }, Act::Img(x)) => {
                let wt = Tensor::new(
                    vec![attrs.out_ch, attrs.in_ch, attrs.kh, attrs.kw],
                    Layout::Nchw,
                    w.clone(),
                )?;
                Act::Img(crate::engine::conv2d_direct(x, &wt, Some(b), attrs.stride, attrs.padding)?)
            }
            (TrainLayer::Relu, Act::Mat(t)) => {
                let mut o = t.clone();
                for v in &mut o.data {
                    *v = v.max(0.0);
                }
                Act::Mat(o)
            }
            (TrainLayer::Relu, Act::Img(t)) => {
                let mut o = t.clone();
                for v in &mut o.data {
                    *v = v.max(0.0);
                }
                Act::Img(o)
            }
            _ => return Err(Error::Shape("layer incompatible with activation kind".into())),
        };
    }
    match act {
        Act::Mat(t) => Ok((t.dims[0], t.data)),
        Act::Img(_) => Err(Error::Shape("net must end in a matrix of logits".into())),
    }
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of correct argmax predictions, evaluated in batches.
pub fn accuracy(net: &TrainableNet, ds: &Dataset) -> Result<f32> {
    if ds.is_empty() {
        return Err(Error::Parameter("empty evaluation set".into()));
    }
    let classes = net.num_classes;
    let mut correct = 0usize;
    let batch = 200usize;
    let mut i = 0usize;
    while i < ds.len() {
        let b = batch.min(ds.len() - i);
        let images = &ds.images[i * ds.sample_len()..(i + b) * ds.sample_len()];
        let (rows, logits) = forward_logits(net, images, b)?;
        debug_assert_eq!(rows, classes);
        for bi in 0..b {
            let mut best = 0;
            for c in 1..classes {
                if logits[c * b + bi] > logits[best * b + bi] {
                    best = c;
                }
            }
            if best == ds.labels[i + bi] as usize {
                correct += 1;
            }
        }
        i += b;
    }
    Ok(correct as f32 / ds.len() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..n * 16).map(|_| rng.random_range(0.0f32..1.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..3u8)).collect();
        Dataset { images, labels, rows: 4, cols: 4 }
    }

    fn tiny_mlp(seed: u64) -> TrainableNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![
            TrainLayer::Flatten,
            fc_init(&mut rng, 16, 8),
            TrainLayer::Relu,
            fc_init(&mut rng, 8, 3),
        ];
        TrainableNet { layers, input_dims: [1, 4, 4], num_classes: 3 }
    }

    #[test]
    fn zero_weight_net_gives_uniform_softmax_loss() {
        let mut net = tiny_mlp(1);
        for l in &mut net.layers {
            if let Some(w) = l.weights_mut() {
                w.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let ds = tiny_dataset(4, 2);
        let (images, labels) = gather_batch(&ds, &[0, 1, 2, 3]);
        let (loss, _) = forward_backward(&net, &images, &labels, 4).unwrap();
        let expect = (3.0f32).ln();
        assert!((loss - expect).abs() < 1e-5, "loss {} vs ln(3) {}", loss, expect);
    }

    #[test]
    fn duplicated_batch_keeps_mean_loss() {
        let net = tiny_mlp(3);
        let ds = tiny_dataset(3, 4);
        let (images, labels) = gather_batch(&ds, &[0, 1, 2]);
        let (loss1, _) = forward_backward(&net, &images, &labels, 3).unwrap();
        let mut images2 = images.clone();
        images2.extend_from_slice(&images);
        let mut labels2 = labels.clone();
        labels2.extend_from_slice(&labels);
        let (loss2, _) = forward_backward(&net, &images2, &labels2, 6).unwrap();
        assert!((loss1 - loss2).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let mut net = tiny_mlp(5);
        let before: Vec<Vec<f32>> =
            net.layers.iter().filter_map(|l| l.weights().map(|w| w.to_vec())).collect();
        let ds = tiny_dataset(8, 6);
        let opts = SgdOptions { lr: 0.0, momentum: 0.9, batch: 4 };
        train_dense(&mut net, &ds, &ds, 3, &opts, 1).unwrap();
        let after: Vec<Vec<f32>> =
            net.layers.iter().filter_map(|l| l.weights().map(|w| w.to_vec())).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn same_seed_trains_bit_identically() {
        let ds = tiny_dataset(16, 7);
        let opts = SgdOptions { lr: 0.05, momentum: 0.9, batch: 4 };
        let mut a = tiny_mlp(8);
        let mut b = tiny_mlp(8);
        train_dense(&mut a, &ds, &ds, 2, &opts, 99).unwrap();
        train_dense(&mut b, &ds, &ds, 2, &opts, 99).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.weights(), lb.weights());
        }
    }

    fn numeric_grad(net: &TrainableNet, images: &[f32], labels: &[u8], batch: usize) -> Vec<Vec<f32>> {
        let eps = 1e-3f32;
        let mut out = Vec::new();
        for li in net.param_layer_indices() {
            let n = net.layers[li].weights().unwrap().len();
            let mut g = vec![0.0f32; n];
            for i in 0..n {
                let mut plus = net.clone();
                plus.layers[li].weights_mut().unwrap()[i] += eps;
                let (lp, _) = forward_backward(&plus, images, labels, batch).unwrap();
                let mut minus = net.clone();
                minus.layers[li].weights_mut().unwrap()[i] -= eps;
                let (lm, _) = forward_backward(&minus, images, labels, batch).unwrap();
                g[i] = (lp - lm) / (2.0 * eps);
            }
            out.push(g);
        }
        out
    }

    #[test]
    fn analytic_matches_central_differences_mlp() {
        let net = tiny_mlp(11);
        let ds = tiny_dataset(4, 12);
        let (images, labels) = gather_batch(&ds, &[0, 1, 2, 3]);
        let (_, grads) = forward_backward(&net, &images, &labels, 4).unwrap();
        let numeric = numeric_grad(&net, &images, &labels, 4);
        for (pi, li) in net.param_layer_indices().into_iter().enumerate() {
            let analytic = &grads[li].as_ref().unwrap().dw;
            for (a, n) in analytic.iter().zip(&numeric[pi]) {
                let denom = n.abs().max(1e-2);
                assert!(
                    (a - n).abs() / denom <= 1e-2,
                    "layer {}: analytic {} vs numeric {}",
                    li,
                    a,
                    n
                );
            }
        }
    }

    #[test]
    fn analytic_matches_central_differences_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let attrs = ConvAttrs { in_ch: 1, out_ch: 2, kh: 3, kw: 3, stride: 1, padding: 1 };
        let layers = vec![
            conv_init(&mut rng, attrs),
            TrainLayer::Relu,
            TrainLayer::Flatten,
            fc_init(&mut rng, 2 * 16, 3),
        ];
        let net = TrainableNet { layers, input_dims: [1, 4, 4], num_classes: 3 };
        let ds = tiny_dataset(2, 22);
        let (images, labels) = gather_batch(&ds, &[0, 1]);
        let (_, grads) = forward_backward(&net, &images, &labels, 2).unwrap();
        let numeric = numeric_grad(&net, &images, &labels, 2);
        for (pi, li) in net.param_layer_indices().into_iter().enumerate() {
            let analytic = &grads[li].as_ref().unwrap().dw;
            for (a, n) in analytic.iter().zip(&numeric[pi]) {
                let denom = n.abs().max(1e-2);
                assert!((a - n).abs() / denom <= 1e-2, "layer {}: {} vs {}", li, a, n);
            }
        }
    }
}
