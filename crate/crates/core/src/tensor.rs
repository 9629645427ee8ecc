//! Dense tensors with explicit layout, alignment padding, and im2col lowering.
//!
//! `dims` are always stored in logical (N,C,H,W) order for 4-D tensors and
//! (rows, cols) for 2-D; the `layout` field only decides the memory order of
//! `data`. `logical_dims` records the extents before alignment padding; the
//! padded region is kept all-zero so padded operands are neutral under
//! convolution and GEMM accumulation.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Memory order of the flat `data` buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    Nchw,
    Nhwc,
    RowMajor2d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub layout: Layout,
    pub data: Vec<f32>,
    pub logical_dims: Vec<usize>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, layout: Layout, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                n,
                data.len()
            )));
        }
        check_rank(&dims, layout)?;
        let logical_dims = dims.clone();
        Ok(Self { dims, layout, data, logical_dims })
    }

    pub fn zeros(dims: Vec<usize>, layout: Layout) -> Self {
        let n: usize = dims.iter().product();
        let logical_dims = dims.clone();
        Self { dims, layout, data: vec![0.0; n], logical_dims }
    }

    /// 2-D row-major matrix constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], Layout::RowMajor2d, data)
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    pub fn cols(&self) -> usize {
        self.dims[1]
    }

    /// Flat offset of logical position (n,c,h,w) under this tensor's layout.
    pub fn offset4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let (nn, cc, hh, ww) = (self.dims[0], self.dims[1], self.dims[2], self.dims[3]);
        debug_assert!(n < nn && c < cc && h < hh && w < ww);
        match self.layout {
            Layout::Nchw => ((n * cc + c) * hh + h) * ww + w,
            Layout::Nhwc => ((n * hh + h) * ww + w) * cc + c,
            Layout::RowMajor2d => unreachable!("offset4 on 2-D tensor"),
        }
    }

    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.offset4(n, c, h, w)]
    }

    pub fn at2(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.dims[1] + c]
    }

    pub fn require_2d(&self) -> Result<()> {
        if self.layout != Layout::RowMajor2d || self.rank() != 2 {
            return Err(Error::Shape(format!(
                "expected RowMajor2d matrix, got {:?} rank {}",
                self.layout,
                self.rank()
            )));
        }
        Ok(())
    }

    pub fn require_nchw(&self) -> Result<()> {
        if self.layout != Layout::Nchw || self.rank() != 4 {
            return Err(Error::Shape(format!(
                "expected NCHW tensor, got {:?} rank {}",
                self.layout,
                self.rank()
            )));
        }
        Ok(())
    }
}

fn check_rank(dims: &[usize], layout: Layout) -> Result<()> {
    let ok = match layout {
        Layout::RowMajor2d => dims.len() == 2,
        Layout::Nchw | Layout::Nhwc => dims.len() == 4,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!("layout {:?} incompatible with rank {}", layout, dims.len())))
    }
}

/// Round `dims[axis]` up to a multiple of `unit`, zero-filling new cells.
/// `logical_dims` keeps the pre-padding extents.
pub fn pad_to_alignment(t: &Tensor, unit: usize, axis: usize) -> Result<Tensor> {
    if unit == 0 {
        return Err(Error::Parameter("alignment unit must be >= 1".into()));
    }
    if axis >= t.rank() {
        return Err(Error::Shape(format!("axis {} out of range for rank {}", axis, t.rank())));
    }
    let old = t.dims[axis];
    let new = old.div_ceil(unit) * unit;
    if new == old {
        return Ok(t.clone());
    }
    let mut dims = t.dims.clone();
    dims[axis] = new;
    let mut out = Tensor::zeros(dims, t.layout);
    out.logical_dims = t.logical_dims.clone();
    // Copy element by element through logical coordinates.
    match t.rank() {
        2 => {
            for r in 0..t.dims[0] {
                for c in 0..t.dims[1] {
                    out.data[r * out.dims[1] + c] = t.at2(r, c);
                }
            }
        }
        4 => {
            for n in 0..t.dims[0] {
                for c in 0..t.dims[1] {
                    for h in 0..t.dims[2] {
                        for w in 0..t.dims[3] {
                            let off = out.offset4(n, c, h, w);
                            out.data[off] = t.at4(n, c, h, w);
                        }
                    }
                }
            }
        }
        r => return Err(Error::Shape(format!("unsupported rank {} for padding", r))),
    }
    Ok(out)
}

/// Reorder `data` so the same logical (n,c,h,w) elements live at the target
/// layout's offsets. Logical dims are untouched.
pub fn transform_layout(t: &Tensor, target: Layout) -> Result<Tensor> {
    if target == t.layout {
        return Ok(t.clone());
    }
    match (t.layout, target) {
        (Layout::Nchw, Layout::Nhwc) | (Layout::Nhwc, Layout::Nchw) => {}
        (a, b) => {
            return Err(Error::Unsupported(format!("layout transform {:?} -> {:?}", a, b)));
        }
    }
    let mut out = Tensor::zeros(t.dims.clone(), target);
    out.logical_dims = t.logical_dims.clone();
    for n in 0..t.dims[0] {
        for c in 0..t.dims[1] {
            for h in 0..t.dims[2] {
                for w in 0..t.dims[3] {
                    let off = out.offset4(n, c, h, w);
                    out.data[off] = t.at4(n, c, h, w);
                }
            }
        }
    }
    Ok(out)
}

/// Output spatial extent of a convolution axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfold a single-image NCHW tensor into a (C·kh·kw) × (Ho·Wo) matrix whose
/// columns are receptive fields; cells that fall into the zero padding are 0.
pub fn im2col(input: &Tensor, kh: usize, kw: usize, stride: usize, padding: usize) -> Result<Tensor> {
    input.require_nchw()?;
    if input.dims[0] != 1 {
        return Err(Error::Shape(format!("im2col expects batch 1, got {}", input.dims[0])));
    }
    im2col_image(input, 0, kh, kw, stride, padding)
}

/// im2col for image `n` of a batched NCHW tensor.
pub fn im2col_image(
    input: &Tensor,
    n: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    input.require_nchw()?;
    let (c, h, w) = (input.dims[1], input.dims[2], input.dims[3]);
    if stride == 0 {
        return Err(Error::Shape("stride must be >= 1".into()));
    }
    let ho = conv_out_extent(h, kh, stride, padding)
        .ok_or_else(|| Error::Shape(format!("kernel {}x{} larger than padded input", kh, kw)))?;
    let wo = conv_out_extent(w, kw, stride, padding)
        .ok_or_else(|| Error::Shape(format!("kernel {}x{} larger than padded input", kh, kw)))?;
    let rows = c * kh * kw;
    let cols = ho * wo;
    let mut out = vec![0.0f32; rows * cols];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[row * cols + oy * wo + ox] =
                            input.at4(n, ci, iy as usize, ix as usize);
                    }
                }
            }
        }
    }
    Tensor::matrix(rows, cols, out)
}
