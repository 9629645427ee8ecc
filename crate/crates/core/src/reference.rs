//! Builders for the reference topologies used in tests and benchmarks.
//! Weights are randomly initialized (seeded); these graphs reproduce topology
//! and shape behavior, not trained accuracy.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{
    ActKind, BnParams, ConvAttrs, Graph, LayerKind, LayerSpec, PoolKind, Weights,
};
use crate::tensor::{Layout, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferenceModel {
    MobilenetV1,
    MobilenetV2Stub,
    Lenet5,
    Lenet300_100,
}

impl ReferenceModel {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mobilenet_v1" => Ok(Self::MobilenetV1),
            "mobilenet_v2_stub" => Ok(Self::MobilenetV2Stub),
            "lenet5" => Ok(Self::Lenet5),
            "lenet_300_100" => Ok(Self::Lenet300_100),
            other => Err(Error::Unsupported(format!("unknown reference model '{}'", other))),
        }
    }
}

pub fn build_reference_graph(name: ReferenceModel) -> Result<Graph> {
    match name {
        ReferenceModel::MobilenetV1 => Ok(mobilenet_v1(224, 42)),
        ReferenceModel::MobilenetV2Stub => Ok(mobilenet_v2_stub(64, 42)),
        ReferenceModel::Lenet5 => Ok(lenet5(42)),
        ReferenceModel::Lenet300_100 => Ok(lenet_300_100(42)),
    }
}

struct Builder {
    rng: ChaCha8Rng,
    nodes: Vec<LayerSpec>,
    edges: Vec<(u32, u32)>,
    next: u32,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), nodes: Vec::new(), edges: Vec::new(), next: 0 }
    }

    fn push(&mut self, spec: LayerSpec, pred: &[u32]) -> u32 {
        let id = spec.id;
        self.nodes.push(spec);
        for &p in pred {
            self.edges.push((p, id));
        }
        id
    }

    fn fresh(&mut self) -> u32 {
        let id = self.next;
        self.next += 1;
        id
    }

    fn uniform(&mut self, n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|_| self.rng.random_range(-scale..scale)).collect()
    }

    fn input(&mut self, dims: Vec<usize>) -> u32 {
        let id = self.fresh();
        self.push(LayerSpec::new(id, LayerKind::Input { dims }), &[])
    }

    fn conv_weights(&mut self, out_ch: usize, in_ch: usize, kh: usize, kw: usize) -> Tensor {
        let fan_in = in_ch * kh * kw;
        let scale = (2.0 / fan_in as f32).sqrt();
        let data = self.uniform(out_ch * in_ch * kh * kw, scale);
        Tensor::new(vec![out_ch, in_ch, kh, kw], Layout::Nchw, data).unwrap()
    }

    fn bn(&mut self, ch: usize) -> BnParams {
        BnParams {
            gamma: self.uniform(ch, 0.5).iter().map(|g| 1.0 + g).collect(),
            beta: self.uniform(ch, 0.1),
            mean: self.uniform(ch, 0.1),
            var: self.uniform(ch, 0.4).iter().map(|v| 1.0 + v).collect(),
            eps: 1e-5,
        }
    }

    fn conv(&mut self, pred: u32, attrs: ConvAttrs) -> u32 {
        let w = self.conv_weights(attrs.out_ch, attrs.in_ch, attrs.kh, attrs.kw);
        let b = self.uniform(attrs.out_ch, 0.05);
        let id = self.fresh();
        self.push(
            LayerSpec::new(id, LayerKind::Conv2d(attrs))
                .with_weights(Weights::Dense(w))
                .with_bias(b),
            &[pred],
        )
    }

    fn depthwise(&mut self, pred: u32, ch: usize, k: usize, stride: usize, padding: usize) -> u32 {
        let fan_in = k * k;
        let scale = (2.0 / fan_in as f32).sqrt();
        let data = self.uniform(ch * k * k, scale);
        let w = Tensor::new(vec![ch, 1, k, k], Layout::Nchw, data).unwrap();
        let b = self.uniform(ch, 0.05);
        let id = self.fresh();
        self.push(
            LayerSpec::new(
                id,
                LayerKind::DepthwiseConv2d { channels: ch, kh: k, kw: k, stride, padding },
            )
            .with_weights(Weights::Dense(w))
            .with_bias(b),
            &[pred],
        )
    }

    fn batchnorm(&mut self, pred: u32, ch: usize) -> u32 {
        let bn = self.bn(ch);
        let id = self.fresh();
        self.push(LayerSpec::new(id, LayerKind::BatchNorm).with_bn(bn), &[pred])
    }

    fn act(&mut self, pred: u32, kind: ActKind) -> u32 {
        let id = self.fresh();
        self.push(LayerSpec::new(id, LayerKind::Activation(kind)), &[pred])
    }

    fn pool(&mut self, pred: u32, kind: PoolKind, window: usize, stride: usize) -> u32 {
        let id = self.fresh();
        self.push(LayerSpec::new(id, LayerKind::Pool { kind, window, stride }), &[pred])
    }

    fn fc(&mut self, pred: u32, in_dim: usize, out_dim: usize) -> u32 {
        let scale = (2.0 / in_dim as f32).sqrt();
        let data = self.uniform(out_dim * in_dim, scale);
        let w = Tensor::matrix(out_dim, in_dim, data).unwrap();
        let b = self.uniform(out_dim, 0.05);
        let id = self.fresh();
        self.push(
            LayerSpec::new(id, LayerKind::FullyConnected { in_dim, out_dim })
                .with_weights(Weights::Dense(w))
                .with_bias(b),
            &[pred],
        )
    }

    fn add(&mut self, a: u32, b: u32) -> u32 {
        let id = self.fresh();
        self.push(LayerSpec::new(id, LayerKind::Add), &[a, b])
    }

    fn conv_bn_act(&mut self, pred: u32, attrs: ConvAttrs, act: ActKind) -> u32 {
        let c = self.conv(pred, attrs);
        let b = self.batchnorm(c, attrs.out_ch);
        self.act(b, act)
    }

    fn dw_bn_act(&mut self, pred: u32, ch: usize, stride: usize, act: ActKind) -> u32 {
        let d = self.depthwise(pred, ch, 3, stride, 1);
        let b = self.batchnorm(d, ch);
        self.act(b, act)
    }

    fn finish(self) -> Graph {
        Graph::new(self.nodes, self.edges)
    }
}

fn pw(in_ch: usize, out_ch: usize) -> ConvAttrs {
    ConvAttrs { in_ch, out_ch, kh: 1, kw: 1, stride: 1, padding: 0 }
}

/// MobileNet-V1 topology: stem conv + 13 depthwise-separable blocks + global
/// average pool + classifier. `layer_count()` of the result is 31 under the
/// documented convention.
pub fn mobilenet_v1(resolution: usize, seed: u64) -> Graph {
    let mut b = Builder::new(seed);
    let x = b.input(vec![1, 3, resolution, resolution]);
    let stem = ConvAttrs { in_ch: 3, out_ch: 32, kh: 3, kw: 3, stride: 2, padding: 1 };
    let mut cur = b.conv_bn_act(x, stem, ActKind::Relu6);
    // (input channels, output channels, depthwise stride) per block
    let blocks: [(usize, usize, usize); 13] = [
        (32, 64, 1),
        (64, 128, 2),
        (128, 128, 1),
        (128, 256, 2),
        (256, 256, 1),
        (256, 512, 2),
        (512, 512, 1),
        (512, 512, 1),
        (512, 512, 1),
        (512, 512, 1),
        (512, 512, 1),
        (512, 1024, 2),
        (1024, 1024, 1),
    ];
    for (cin, cout, stride) in blocks {
        cur = b.dw_bn_act(cur, cin, stride, ActKind::Relu6);
        cur = b.conv_bn_act(cur, pw(cin, cout), ActKind::Relu6);
    }
    let spatial = resolution / 32;
    cur = b.pool(cur, PoolKind::Avg, spatial, 1);
    cur = b.fc(cur, 1024, 1000);
    b.act(cur, ActKind::Identity);
    b.finish()
}

/// Miniature MobileNet-V2-style graph: one inverted residual block with a
/// residual Add, enough to exercise multi-consumer fusion legality.
pub fn mobilenet_v2_stub(resolution: usize, seed: u64) -> Graph {
    let mut b = Builder::new(seed);
    let x = b.input(vec![1, 3, resolution, resolution]);
    let stem = ConvAttrs { in_ch: 3, out_ch: 16, kh: 3, kw: 3, stride: 2, padding: 1 };
    let block_in = b.conv_bn_act(x, stem, ActKind::Relu6);
    let expand = b.conv_bn_act(block_in, pw(16, 32), ActKind::Relu6);
    let dw = b.dw_bn_act(expand, 32, 1, ActKind::Relu6);
    let project = b.conv(dw, pw(32, 16));
    let project_bn = b.batchnorm(project, 16);
    let sum = b.add(project_bn, block_in);
    let spatial = resolution / 2;
    let pooled = b.pool(sum, PoolKind::Avg, spatial, 1);
    let logits = b.fc(pooled, 16, 10);
    b.act(logits, ActKind::Identity);
    b.finish()
}

/// Classic LeNet-5-style CNN for 28x28 single-channel input.
pub fn lenet5(seed: u64) -> Graph {
    let mut b = Builder::new(seed);
    let x = b.input(vec![1, 1, 28, 28]);
    let c1 = ConvAttrs { in_ch: 1, out_ch: 6, kh: 5, kw: 5, stride: 1, padding: 2 };
    let mut cur = b.conv(x, c1);
    cur = b.act(cur, ActKind::Relu);
    cur = b.pool(cur, PoolKind::Max, 2, 2);
    let c2 = ConvAttrs { in_ch: 6, out_ch: 16, kh: 5, kw: 5, stride: 1, padding: 0 };
    cur = b.conv(cur, c2);
    cur = b.act(cur, ActKind::Relu);
    cur = b.pool(cur, PoolKind::Max, 2, 2);
    cur = b.fc(cur, 16 * 5 * 5, 120);
    cur = b.act(cur, ActKind::Relu);
    cur = b.fc(cur, 120, 84);
    cur = b.act(cur, ActKind::Relu);
    b.fc(cur, 84, 10);
    b.finish()
}

/// 784-300-100-10 multilayer perceptron.
pub fn lenet_300_100(seed: u64) -> Graph {
    let mut b = Builder::new(seed);
    let x = b.input(vec![1, 1, 28, 28]);
    let mut cur = b.fc(x, 784, 300);
    cur = b.act(cur, ActKind::Relu);
    cur = b.fc(cur, 300, 100);
    cur = b.act(cur, ActKind::Relu);
    b.fc(cur, 100, 10);
    b.finish()
}
