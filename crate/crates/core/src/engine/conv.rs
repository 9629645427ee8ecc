//! Direct convolution kernels: the reference semantics every conv rewrite is
//! checked against.

use crate::error::{Error, Result};
use crate::tensor::{conv_out_extent, Layout, Tensor};

/// Standard cross-correlation with zero padding. x: NCHW, w: (K,C,kh,kw).
pub fn conv2d_direct(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    x.require_nchw()?;
    if w.rank() != 4 {
        return Err(Error::Shape(format!("conv weights must be 4-D, got {:?}", w.dims)));
    }
    let (n, c, h, wd) = (x.dims[0], x.dims[1], x.dims[2], x.dims[3]);
    let (kout, cin, kh, kw) = (w.dims[0], w.dims[1], w.dims[2], w.dims[3]);
    if cin != c {
        return Err(Error::Shape(format!("input channels {} != weight channels {}", c, cin)));
    }
    if let Some(b) = bias {
        if b.len() != kout {
            return Err(Error::Shape(format!("bias length {} != out channels {}", b.len(), kout)));
        }
    }
    let ho = conv_out_extent(h, kh, stride, padding)
        .ok_or_else(|| Error::Shape("kernel larger than padded input".into()))?;
    let wo = conv_out_extent(wd, kw, stride, padding)
        .ok_or_else(|| Error::Shape("kernel larger than padded input".into()))?;
    let mut out = Tensor::zeros(vec![n, kout, ho, wo], Layout::Nchw);
    for ni in 0..n {
        for ko in 0..kout {
            let b = bias.map_or(0.0, |b| b[ko]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f32;
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at4(ni, ci, iy as usize, ix as usize)
                                    * w.at4(ko, ci, ky, kx);
                            }
                        }
                    }
                    let off = out.offset4(ni, ko, oy, ox);
                    out.data[off] = acc + b;
                }
            }
        }
    }
    Ok(out)
}

/// Per-channel spatial convolution, no cross-channel mixing. w: (C,1,kh,kw).
pub fn depthwise_conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    x.require_nchw()?;
    let (n, c, h, wd) = (x.dims[0], x.dims[1], x.dims[2], x.dims[3]);
    if w.rank() != 4 || w.dims[0] != c || w.dims[1] != 1 {
        return Err(Error::Shape(format!(
            "depthwise weights must be ({},1,kh,kw), got {:?}",
            c, w.dims
        )));
    }
    let (kh, kw) = (w.dims[2], w.dims[3]);
    let ho = conv_out_extent(h, kh, stride, padding)
        .ok_or_else(|| Error::Shape("kernel larger than padded input".into()))?;
    let wo = conv_out_extent(wd, kw, stride, padding)
        .ok_or_else(|| Error::Shape("kernel larger than padded input".into()))?;
    let mut out = Tensor::zeros(vec![n, c, ho, wo], Layout::Nchw);
    for ni in 0..n {
        for ci in 0..c {
            let plane = &x.data[(ni * c + ci) * h * wd..][..h * wd];
            let wk = &w.data[ci * kh * kw..][..kh * kw];
            let base = (ni * c + ci) * ho * wo;
            let b = bias.map_or(0.0, |b| b[ci]);
            for oy in 0..ho {
                let iy0 = (oy * stride) as isize - padding as isize;
                let row = &mut out.data[base + oy * wo..][..wo];
                for (ox, o) in row.iter_mut().enumerate() {
                    let ix0 = (ox * stride) as isize - padding as isize;
                    let mut acc = 0.0f32;
                    let interior = iy0 >= 0
                        && ix0 >= 0
                        && iy0 + kh as isize <= h as isize
                        && ix0 + kw as isize <= wd as isize;
                    if interior {
                        // the whole window is in bounds; same ky/kx
                        // accumulation order as the checked path
                        let (iy0, ix0) = (iy0 as usize, ix0 as usize);
                        for ky in 0..kh {
                            let xrow = &plane[(iy0 + ky) * wd + ix0..][..kw];
                            let wrow = &wk[ky * kw..][..kw];
                            for kx in 0..kw {
                                acc += xrow[kx] * wrow[kx];
                            }
                        }
                    } else {
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += plane[iy as usize * wd + ix as usize] * wk[ky * kw + kx];
                            }
                        }
                    }
                    *o = acc + b;
                }
            }
        }
    }
    Ok(out)
}
