//! Stride-1, zero-padded 2-D convolution kernels over NCHW buffers.
//!
//! The three kernels are the partial derivatives of one trilinear form
//! `T(x, w, y) = sum y[n,o,i,j] * x[n,c,i+a-p,j+b-p] * w[o,c,a,b]`,
//! so each one's vector-Jacobian products are expressed with the other two.

use ndarray::{ArrayD, IxDyn};

use crate::Tensor;

fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected NCHW tensor, got shape {s:?}");
    [s[0], s[1], s[2], s[3]]
}

pub(crate) fn out_hw(h: usize, w: usize, k: usize, pad: usize) -> (usize, usize) {
    assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
    (h + 2 * pad - k + 1, w + 2 * pad - k + 1)
}

/// Column range `j` such that `j + b - pad` falls inside `0..width`, clipped to `0..wo`.
#[inline]
fn valid_cols(b: usize, pad: usize, width: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(b);
    let hi = (width + pad).saturating_sub(b).min(wo);
    (lo, hi.max(lo))
}

/// y = conv(x, w)
pub(crate) fn conv2d(x: &Tensor, w: &Tensor, pad: usize) -> Tensor {
    let [n, c, h, wd] = dims4(x);
    let [o, c2, k, k2] = dims4(w);
    assert_eq!(c, c2, "conv2d channel mismatch");
    assert_eq!(k, k2, "only square kernels are supported");
    let (ho, wo) = out_hw(h, wd, k, pad);
    let xs = x.as_standard_layout();
    let ws = w.as_standard_layout();
    let xd = xs.as_slice().unwrap();
    let wdat = ws.as_slice().unwrap();
    let mut y = vec![0.0; n * o * ho * wo];
    for ni in 0..n {
        for oi in 0..o {
            let ybase = (ni * o + oi) * ho * wo;
            for ci in 0..c {
                let xbase = (ni * c + ci) * h * wd;
                for a in 0..k {
                    for b in 0..k {
                        let wv = wdat[((oi * c + ci) * k + a) * k + b];
                        if wv == 0.0 {
                            continue;
                        }
                        let (j0, j1) = valid_cols(b, pad, wd, wo);
                        for i in 0..ho {
                            let hi = i + a;
                            if hi < pad || hi - pad >= h {
                                continue;
                            }
                            let xrow = xbase + (hi - pad) * wd;
                            let yrow = ybase + i * wo;
                            for j in j0..j1 {
                                y[yrow + j] += wv * xd[xrow + j + b - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, o, ho, wo]), y).unwrap()
}

/// Adjoint of `conv2d` in its input: maps an output-shaped tensor back to `x_shape`.
pub(crate) fn conv2d_transpose(y: &Tensor, w: &Tensor, x_shape: &[usize], pad: usize) -> Tensor {
    let [n, o, ho, wo] = dims4(y);
    let [o2, c, k, _] = dims4(w);
    assert_eq!(o, o2, "conv2d_transpose channel mismatch");
    let (h, wd) = (x_shape[2], x_shape[3]);
    assert_eq!(x_shape[0], n);
    assert_eq!(x_shape[1], c);
    assert_eq!(out_hw(h, wd, k, pad), (ho, wo), "conv2d_transpose shape mismatch");
    let ys = y.as_standard_layout();
    let ws = w.as_standard_layout();
    let yd = ys.as_slice().unwrap();
    let wdat = ws.as_slice().unwrap();
    let mut x = vec![0.0; n * c * h * wd];
    for ni in 0..n {
        for oi in 0..o {
            let ybase = (ni * o + oi) * ho * wo;
            for ci in 0..c {
                let xbase = (ni * c + ci) * h * wd;
                for a in 0..k {
                    for b in 0..k {
                        let wv = wdat[((oi * c + ci) * k + a) * k + b];
                        if wv == 0.0 {
                            continue;
                        }
                        let (j0, j1) = valid_cols(b, pad, wd, wo);
                        for i in 0..ho {
                            let hi = i + a;
                            if hi < pad || hi - pad >= h {
                                continue;
                            }
                            let xrow = xbase + (hi - pad) * wd;
                            let yrow = ybase + i * wo;
                            for j in j0..j1 {
                                x[xrow + j + b - pad] += wv * yd[yrow + j];
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(x_shape), x).unwrap()
}

/// Adjoint of `conv2d` in its weight: correlates input with an output-shaped tensor.
pub(crate) fn conv2d_weight(x: &Tensor, y: &Tensor, w_shape: &[usize], pad: usize) -> Tensor {
    let [n, c, h, wd] = dims4(x);
    let [n2, o, ho, wo] = dims4(y);
    assert_eq!(n, n2);
    let k = w_shape[2];
    assert_eq!(w_shape[0], o);
    assert_eq!(w_shape[1], c);
    assert_eq!(out_hw(h, wd, k, pad), (ho, wo), "conv2d_weight shape mismatch");
    let xs = x.as_standard_layout();
    let ys = y.as_standard_layout();
    let xd = xs.as_slice().unwrap();
    let yd = ys.as_slice().unwrap();
    let mut w = vec![0.0; o * c * k * k];
    for ni in 0..n {
        for oi in 0..o {
            let ybase = (ni * o + oi) * ho * wo;
            for ci in 0..c {
                let xbase = (ni * c + ci) * h * wd;
                for a in 0..k {
                    for b in 0..k {
                        let (j0, j1) = valid_cols(b, pad, wd, wo);
                        let mut acc = 0.0;
                        for i in 0..ho {
                            let hi = i + a;
                            if hi < pad || hi - pad >= h {
                                continue;
                            }
                            let xrow = xbase + (hi - pad) * wd;
                            let yrow = ybase + i * wo;
                            for j in j0..j1 {
                                acc += yd[yrow + j] * xd[xrow + j + b - pad];
                            }
                        }
                        w[((oi * c + ci) * k + a) * k + b] += acc;
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(w_shape), w).unwrap()
}

/// Sum over non-overlapping 2x2 blocks.
pub(crate) fn pool_sum2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = dims4(x);
    assert!(h % 2 == 0 && w % 2 == 0, "pool_sum2 needs even spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let xs = x.as_standard_layout();
    let xd = xs.as_slice().unwrap();
    let mut y = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        for i in 0..h {
            for j in 0..w {
                y[p * ho * wo + (i / 2) * wo + j / 2] += xd[p * h * w + i * w + j];
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), y).unwrap()
}

/// Nearest-neighbour 2x upsampling; the adjoint of `pool_sum2`.
pub(crate) fn upsample2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = dims4(x);
    let (ho, wo) = (h * 2, w * 2);
    let xs = x.as_standard_layout();
    let xd = xs.as_slice().unwrap();
    let mut y = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                y[p * ho * wo + i * wo + j] = xd[p * h * w + (i / 2) * w + j / 2];
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), y).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Array::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    #[test]
    fn identity_kernel_copies_the_input() {
        let x = t(&[1, 1, 3, 3], (0..9).map(f64::from).collect());
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        assert_eq!(conv2d(&x, &t(&[1, 1, 3, 3], w), 1), x);
    }

    #[test]
    fn box_kernel_sums_neighbourhoods() {
        let x = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let y = conv2d(&x, &t(&[1, 1, 3, 3], vec![1.0; 9]), 1);
        let expect = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(y.iter().copied().collect::<Vec<_>>(), expect);
        let valid = conv2d(&x, &t(&[1, 1, 3, 3], vec![1.0; 9]), 0);
        assert_eq!(valid.shape(), &[1, 1, 1, 1]);
        assert_eq!(valid[[0, 0, 0, 0]], 9.0);
    }

    #[test]
    fn pooling_and_upsampling_shapes() {
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pool_sum2(&x).iter().copied().collect::<Vec<_>>(), [10.0]);
        let u = upsample2(&x);
        assert_eq!(u.shape(), &[1, 1, 4, 4]);
        assert_eq!(u[[0, 0, 3, 2]], 4.0);
        assert_eq!(out_hw(16, 16, 3, 1), (16, 16));
    }
}
