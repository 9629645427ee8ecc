//! "CADM" model file format, version 1.
//!
//! Little-endian throughout: magic `CADM`, u32 version, u32 node count, the
//! nodes (u16 kind code, u32 id, kind-specific attr block, optional bias and
//! batchnorm blocks, u8 weight-encoding tag and blob), then u32 edge count
//! and (u32,u32) producer/consumer pairs. Save/load round-trips a graph
//! bit-exactly; tile packing is a runtime decision and is not persisted.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};
use crate::graph::{
    ActKind, BnParams, ConvAttrs, Graph, LayerKind, LayerSpec, PoolKind, Weights,
};
use crate::sparse::SparseMatrixCsr;
use crate::tensor::{Layout, Tensor};

pub const MAGIC: [u8; 4] = *b"CADM";
pub const VERSION: u32 = 1;

const KIND_INPUT: u16 = 0;
const KIND_CONV2D: u16 = 1;
const KIND_DEPTHWISE: u16 = 2;
const KIND_BATCHNORM: u16 = 3;
const KIND_ACTIVATION: u16 = 4;
const KIND_POOL: u16 = 5;
const KIND_FC: u16 = 6;
const KIND_ADD: u16 = 7;
const KIND_GEMM: u16 = 8;
const KIND_FUSED: u16 = 9;

const WEIGHTS_NONE: u8 = 0;
const WEIGHTS_DENSE: u8 = 1;
const WEIGHTS_CSR: u8 = 2;

pub fn save_model(g: &Graph, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(g.nodes.len() as u32)?;
    for node in &g.nodes {
        write_node(&mut w, node)?;
    }
    w.write_u32::<LittleEndian>(g.edges.len() as u32)?;
    for &(s, d) in &g.edges {
        w.write_u32::<LittleEndian>(s)?;
        w.write_u32::<LittleEndian>(d)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Graph> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:02x?}", magic)));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {}", version)));
    }
    let n_nodes = read_u32(&mut r)? as usize;
    let mut nodes = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        nodes.push(read_node(&mut r)?);
    }
    let n_edges = read_u32(&mut r)? as usize;
    let mut edges = Vec::with_capacity(n_edges);
    for _ in 0..n_edges {
        let s = read_u32(&mut r)?;
        let d = read_u32(&mut r)?;
        edges.push((s, d));
    }
    Ok(Graph::new(nodes, edges))
}

fn act_code(a: ActKind) -> u8 {
    match a {
        ActKind::Identity => 0,
        ActKind::Relu => 1,
        ActKind::Relu6 => 2,
    }
}

fn act_from(code: u8) -> Result<ActKind> {
    match code {
        0 => Ok(ActKind::Identity),
        1 => Ok(ActKind::Relu),
        2 => Ok(ActKind::Relu6),
        c => Err(Error::Format(format!("unknown activation code {}", c))),
    }
}

fn layout_code(l: Layout) -> u8 {
    match l {
        Layout::Nchw => 0,
        Layout::Nhwc => 1,
        Layout::RowMajor2d => 2,
    }
}

fn layout_from(code: u8) -> Result<Layout> {
    match code {
        0 => Ok(Layout::Nchw),
        1 => Ok(Layout::Nhwc),
        2 => Ok(Layout::RowMajor2d),
        c => Err(Error::Format(format!("unknown layout code {}", c))),
    }
}

fn write_conv_attrs<W: Write>(w: &mut W, a: &ConvAttrs) -> Result<()> {
    for v in [a.in_ch, a.out_ch, a.kh, a.kw, a.stride, a.padding] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    Ok(())
}

fn read_conv_attrs<R: Read>(r: &mut R) -> Result<ConvAttrs> {
    let mut v = [0usize; 6];
    for e in &mut v {
        *e = read_u32(r)? as usize;
    }
    Ok(ConvAttrs { in_ch: v[0], out_ch: v[1], kh: v[2], kw: v[3], stride: v[4], padding: v[5] })
}

fn write_node<W: Write>(w: &mut W, node: &LayerSpec) -> Result<()> {
    let code = match &node.kind {
        LayerKind::Input { .. } => KIND_INPUT,
        LayerKind::Conv2d(_) => KIND_CONV2D,
        LayerKind::DepthwiseConv2d { .. } => KIND_DEPTHWISE,
        LayerKind::BatchNorm => KIND_BATCHNORM,
        LayerKind::Activation(_) => KIND_ACTIVATION,
        LayerKind::Pool { .. } => KIND_POOL,
        LayerKind::FullyConnected { .. } => KIND_FC,
        LayerKind::Add => KIND_ADD,
        LayerKind::Gemm { .. } => KIND_GEMM,
        LayerKind::FusedConvBnAct { .. } => KIND_FUSED,
    };
    w.write_u16::<LittleEndian>(code)?;
    w.write_u32::<LittleEndian>(node.id)?;
    match &node.kind {
        LayerKind::Input { dims } => {
            w.write_u8(dims.len() as u8)?;
            for &d in dims {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
        }
        LayerKind::Conv2d(a) => write_conv_attrs(w, a)?,
        LayerKind::DepthwiseConv2d { channels, kh, kw, stride, padding } => {
            for v in [*channels, *kh, *kw, *stride, *padding] {
                w.write_u32::<LittleEndian>(v as u32)?;
            }
        }
        LayerKind::BatchNorm | LayerKind::Add => {}
        LayerKind::Activation(a) => w.write_u8(act_code(*a))?,
        LayerKind::Pool { kind, window, stride } => {
            w.write_u8(match kind {
                PoolKind::Max => 0,
                PoolKind::Avg => 1,
            })?;
            w.write_u32::<LittleEndian>(*window as u32)?;
            w.write_u32::<LittleEndian>(*stride as u32)?;
        }
        LayerKind::FullyConnected { in_dim, out_dim } => {
            w.write_u32::<LittleEndian>(*in_dim as u32)?;
            w.write_u32::<LittleEndian>(*out_dim as u32)?;
        }
        LayerKind::Gemm { out_rows, inner } => {
            w.write_u32::<LittleEndian>(*out_rows as u32)?;
            w.write_u32::<LittleEndian>(*inner as u32)?;
        }
        LayerKind::FusedConvBnAct { depthwise, attrs, act } => {
            w.write_u8(*depthwise as u8)?;
            write_conv_attrs(w, attrs)?;
            w.write_u8(act_code(*act))?;
        }
    }
    match &node.bias {
        Some(b) => {
            w.write_u8(1)?;
            w.write_u32::<LittleEndian>(b.len() as u32)?;
            write_f32s(w, b)?;
        }
        None => w.write_u8(0)?,
    }
    match &node.bn_params {
        Some(bn) => {
            w.write_u8(1)?;
            w.write_u32::<LittleEndian>(bn.gamma.len() as u32)?;
            write_f32s(w, &bn.gamma)?;
            write_f32s(w, &bn.beta)?;
            write_f32s(w, &bn.mean)?;
            write_f32s(w, &bn.var)?;
            w.write_f32::<LittleEndian>(bn.eps)?;
        }
        None => w.write_u8(0)?,
    }
    match &node.weights {
        Weights::None => w.write_u8(WEIGHTS_NONE)?,
        Weights::Dense(t) => {
            w.write_u8(WEIGHTS_DENSE)?;
            w.write_u8(t.dims.len() as u8)?;
            for &d in &t.dims {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            w.write_u8(layout_code(t.layout))?;
            write_f32s(w, &t.data)?;
        }
        Weights::Sparse(s) => {
            w.write_u8(WEIGHTS_CSR)?;
            w.write_u64::<LittleEndian>(s.rows as u64)?;
            w.write_u64::<LittleEndian>(s.cols as u64)?;
            w.write_u64::<LittleEndian>(s.nnz() as u64)?;
            write_f32s(w, &s.values)?;
            for &c in &s.col_idx {
                w.write_u32::<LittleEndian>(c)?;
            }
            for &p in &s.row_ptr {
                w.write_u32::<LittleEndian>(p)?;
            }
        }
    }
    Ok(())
}

fn read_node<R: Read>(r: &mut R) -> Result<LayerSpec> {
    let code = read_u16(r)?;
    let id = read_u32(r)?;
    let kind = match code {
        KIND_INPUT => {
            let rank = read_u8(r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(r)? as usize);
            }
            LayerKind::Input { dims }
        }
        KIND_CONV2D => LayerKind::Conv2d(read_conv_attrs(r)?),
        KIND_DEPTHWISE => {
            let mut v = [0usize; 5];
            for e in &mut v {
                *e = read_u32(r)? as usize;
            }
            LayerKind::DepthwiseConv2d {
                channels: v[0],
                kh: v[1],
                kw: v[2],
                stride: v[3],
                padding: v[4],
            }
        }
        KIND_BATCHNORM => LayerKind::BatchNorm,
        KIND_ACTIVATION => LayerKind::Activation(act_from(read_u8(r)?)?),
        KIND_POOL => {
            let kind = match read_u8(r)? {
                0 => PoolKind::Max,
                1 => PoolKind::Avg,
                c => return Err(Error::Format(format!("unknown pool code {}", c))),
            };
            let window = read_u32(r)? as usize;
            let stride = read_u32(r)? as usize;
            LayerKind::Pool { kind, window, stride }
        }
        KIND_FC => {
            let in_dim = read_u32(r)? as usize;
            let out_dim = read_u32(r)? as usize;
            LayerKind::FullyConnected { in_dim, out_dim }
        }
        KIND_ADD => LayerKind::Add,
        KIND_GEMM => {
            let out_rows = read_u32(r)? as usize;
            let inner = read_u32(r)? as usize;
            LayerKind::Gemm { out_rows, inner }
        }
        KIND_FUSED => {
            let depthwise = read_u8(r)? != 0;
            let attrs = read_conv_attrs(r)?;
            let act = act_from(read_u8(r)?)?;
            LayerKind::FusedConvBnAct { depthwise, attrs, act }
        }
        c => return Err(Error::Format(format!("unknown node kind code {}", c))),
    };
    let bias = if read_u8(r)? != 0 {
        let len = read_u32(r)? as usize;
        Some(read_f32s(r, len)?)
    } else {
        None
    };
    let bn_params = if read_u8(r)? != 0 {
        let len = read_u32(r)? as usize;
        Some(BnParams {
            gamma: read_f32s(r, len)?,
            beta: read_f32s(r, len)?,
            mean: read_f32s(r, len)?,
            var: read_f32s(r, len)?,
            eps: read_f32(r)?,
        })
    } else {
        None
    };
    let weights = match read_u8(r)? {
        WEIGHTS_NONE => Weights::None,
        WEIGHTS_DENSE => {
            let rank = read_u8(r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(r)? as usize);
            }
            let layout = layout_from(read_u8(r)?)?;
            let n: usize = dims.iter().product();
            let data = read_f32s(r, n)?;
            Weights::Dense(
                Tensor::new(dims, layout, data)
                    .map_err(|e| Error::Format(format!("dense weight blob: {}", e)))?,
            )
        }
        WEIGHTS_CSR => {
            let rows = read_u64(r)? as usize;
            let cols = read_u64(r)? as usize;
            let nnz = read_u64(r)? as usize;
            let values = read_f32s(r, nnz)?;
            let mut col_idx = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                col_idx.push(read_u32(r)?);
            }
            let mut row_ptr = Vec::with_capacity(rows + 1);
            for _ in 0..rows + 1 {
                row_ptr.push(read_u32(r)?);
            }
            let s = SparseMatrixCsr { rows, cols, values, col_idx, row_ptr, pack: None };
            s.validate().map_err(|e| Error::Corrupt(format!("csr weight blob: {}", e)))?;
            Weights::Sparse(s)
        }
        t => return Err(Error::Format(format!("unknown weight tag {}", t))),
    };
    Ok(LayerSpec { id, kind, weights, bias, bn_params })
}

// truncated files surface as corruption, not generic IO
fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Corrupt("file truncated".into())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    read_exact(r, &mut bytes)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn write_f32s<W: Write>(w: &mut W, v: &[f32]) -> Result<()> {
    for &x in v {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}
