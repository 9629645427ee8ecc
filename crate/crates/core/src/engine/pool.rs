//! Pooling and elementwise kernels.

use crate::error::{Error, Result};
use crate::graph::{ActKind, PoolKind};
use crate::tensor::{conv_out_extent, Layout, Tensor};

pub fn pool2d(x: &Tensor, kind: PoolKind, window: usize, stride: usize) -> Result<Tensor> {
    x.require_nchw()?;
    let (n, c, h, w) = (x.dims[0], x.dims[1], x.dims[2], x.dims[3]);
    let ho = conv_out_extent(h, window, stride, 0)
        .ok_or_else(|| Error::Shape(format!("pool window {} exceeds input {}x{}", window, h, w)))?;
    let wo = conv_out_extent(w, window, stride, 0)
        .ok_or_else(|| Error::Shape(format!("pool window {} exceeds input {}x{}", window, h, w)))?;
    let mut out = Tensor::zeros(vec![n, c, ho, wo], Layout::Nchw);
    let area = (window * window) as f32;
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = match kind {
                        PoolKind::Max => f32::NEG_INFINITY,
                        PoolKind::Avg => 0.0,
                    };
                    for ky in 0..window {
                        for kx in 0..window {
                            let v = x.at4(ni, ci, oy * stride + ky, ox * stride + kx);
                            match kind {
                                PoolKind::Max => acc = acc.max(v),
                                PoolKind::Avg => acc += v,
                            }
                        }
                    }
                    if kind == PoolKind::Avg {
                        acc /= area;
                    }
                    let off = out.offset4(ni, ci, oy, ox);
                    out.data[off] = acc;
                }
            }
        }
    }
    Ok(out)
}

pub fn apply_activation(x: &mut Tensor, act: ActKind) {
    match act {
        ActKind::Identity => {}
        ActKind::Relu => {
            for v in &mut x.data {
                *v = v.max(0.0);
            }
        }
        ActKind::Relu6 => {
            for v in &mut x.data {
                *v = v.max(0.0).min(6.0);
            }
        }
    }
}

pub fn elementwise_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!("add operand dims differ: {:?} vs {:?}", a.dims, b.dims)));
    }
    let mut out = a.clone();
    for (o, &bv) in out.data.iter_mut().zip(&b.data) {
        *o += bv;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::random_nchw;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn max_pool_2x2() {
        let x = Tensor::new(vec![1, 1, 2, 2], Layout::Nchw, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pool2d(&x, PoolKind::Max, 2, 2).unwrap();
        assert_eq!(y.data, vec![4.0]);
    }

    #[test]
    fn relu_and_relu6_clamp() {
        let mut t = Tensor::matrix(1, 3, vec![-1.0, 3.0, 7.0]).unwrap();
        apply_activation(&mut t, ActKind::Relu);
        assert_eq!(t.data, vec![0.0, 3.0, 7.0]);
        let mut t = Tensor::matrix(1, 3, vec![-1.0, 3.0, 7.0]).unwrap();
        apply_activation(&mut t, ActKind::Relu6);
        assert_eq!(t.data, vec![0.0, 3.0, 6.0]);
    }

    #[test]
    fn window_exceeds_input_rejected() {
        let x = random_nchw(1, 1, 3, 3, 1);
        assert!(pool2d(&x, PoolKind::Max, 4, 1).is_err());
    }

    #[test]
    fn avg_pool_matches_brute_force_mean() {
        let mut rng = StdRng::seed_from_u64(77);
        for _ in 0..20 {
            let h = rng.random_range(4..10usize);
            let w = rng.random_range(4..10usize);
            let window = rng.random_range(1..4usize);
            let stride = rng.random_range(1..3usize);
            if window > h || window > w {
                continue;
            }
            let x = random_nchw(1, 2, h, w, rng.random());
            let y = pool2d(&x, PoolKind::Avg, window, stride).unwrap();
            for c in 0..2 {
                for oy in 0..y.dims[2] {
                    for ox in 0..y.dims[3] {
                        let mut sum = 0.0f32;
                        for ky in 0..window {
                            for kx in 0..window {
                                sum += x.at4(0, c, oy * stride + ky, ox * stride + kx);
                            }
                        }
                        let want = sum / (window * window) as f32;
                        let got = y.at4(0, c, oy, ox);
                        assert!((want - got).abs() <= 1e-5 * want.abs().max(1.0));
                    }
                }
            }
        }
    }
}
