use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn};

use crate::conv;
use crate::var::Var;
use crate::Tensor;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar,
    MulScalar(f64),
    Exp,
    Log,
    Sqrt,
    Square,
    Relu,
    Abs,
    Sigmoid,
    SumTo,
    BroadcastTo,
    Reshape,
    MatMul,
    Transpose,
    Conv2d { pad: usize },
    Conv2dTranspose { pad: usize },
    Conv2dWeight { pad: usize },
    PoolSum2,
    Upsample2,
}

fn reduce_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let mut out = t.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && out.shape()[axis] != 1 {
            out = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    assert_eq!(out.shape(), shape, "cannot reduce {:?} to {:?}", t.shape(), shape);
    out
}

fn broadcast(t: &Tensor, shape: &[usize]) -> Tensor {
    t.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", t.shape(), shape))
        .to_owned()
}

fn as2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .unwrap_or_else(|_| panic!("expected a matrix, got shape {:?}", t.shape()))
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let c: Array2<f64> = as2(a).dot(&as2(b));
    c.into_dyn()
}

fn binary(a: &Var, b: &Var, op: Op, f: impl Fn(&Tensor, &Tensor) -> Tensor) -> Var {
    let v = f(a.value(), b.value());
    Var::from_op(v, op, vec![a.clone(), b.clone()])
}

fn unary(a: &Var, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var {
    let v = f(a.value());
    Var::from_op(v, op, vec![a.clone()])
}

fn sum_to_if_needed(g: Var, shape: &[usize]) -> Var {
    if g.shape() == shape {
        g
    } else {
        g.sum_to(shape)
    }
}

impl Op {
    /// Vector-Jacobian products for each input, built from differentiable ops.
    pub(crate) fn backward(&self, node: &Var, gy: &Var) -> Vec<Option<Var>> {
        let inputs = node.inputs();
        match self {
            Op::Add => {
                let (a, b) = (&inputs[0], &inputs[1]);
                vec![
                    Some(sum_to_if_needed(gy.clone(), a.shape())),
                    Some(sum_to_if_needed(gy.clone(), b.shape())),
                ]
            }
            Op::Sub => {
                let (a, b) = (&inputs[0], &inputs[1]);
                vec![
                    Some(sum_to_if_needed(gy.clone(), a.shape())),
                    Some(sum_to_if_needed(-gy, b.shape())),
                ]
            }
            Op::Mul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                vec![
                    a.requires_grad().then(|| sum_to_if_needed(gy * b, a.shape())),
                    b.requires_grad().then(|| sum_to_if_needed(gy * a, b.shape())),
                ]
            }
            Op::Div => {
                let (a, b) = (&inputs[0], &inputs[1]);
                vec![
                    a.requires_grad().then(|| sum_to_if_needed(gy / b, a.shape())),
                    b.requires_grad()
                        .then(|| sum_to_if_needed(-(gy * a) / b.square(), b.shape())),
                ]
            }
            Op::Neg => vec![Some(-gy)],
            Op::AddScalar => vec![Some(gy.clone())],
            Op::MulScalar(c) => vec![Some(gy.mul_scalar(*c))],
            Op::Exp => vec![Some(gy * &inputs[0].exp())],
            Op::Log => vec![Some(gy / &inputs[0])],
            Op::Sqrt => vec![Some((gy / &inputs[0].sqrt()).mul_scalar(0.5))],
            Op::Square => vec![Some((gy * &inputs[0]).mul_scalar(2.0))],
            Op::Relu => {
                let mask = inputs[0].value().mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                vec![Some(gy * &Var::constant(mask))]
            }
            Op::Abs => {
                let sign = inputs[0].value().mapv(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                vec![Some(gy * &Var::constant(sign))]
            }
            Op::Sigmoid => {
                let s = inputs[0].sigmoid();
                let ds = &s * &(-&s).add_scalar(1.0);
                vec![Some(gy * &ds)]
            }
            Op::SumTo => vec![Some(gy.broadcast_to(inputs[0].shape()))],
            Op::BroadcastTo => vec![Some(gy.sum_to(inputs[0].shape()))],
            Op::Reshape => vec![Some(gy.reshape(inputs[0].shape()))],
            Op::MatMul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                vec![
                    a.requires_grad().then(|| gy.matmul(&b.t())),
                    b.requires_grad().then(|| a.t().matmul(gy)),
                ]
            }
            Op::Transpose => vec![Some(gy.t())],
            Op::Conv2d { pad } => {
                let (x, w) = (&inputs[0], &inputs[1]);
                vec![
                    x.requires_grad()
                        .then(|| gy.conv2d_transpose(w, x.shape(), *pad)),
                    w.requires_grad().then(|| x.conv2d_weight(gy, w.shape(), *pad)),
                ]
            }
            Op::Conv2dTranspose { pad } => {
                // node = conv^T(y, w), shaped like a conv input
                let (y, w) = (&inputs[0], &inputs[1]);
                vec![
                    y.requires_grad().then(|| gy.conv2d(w, *pad)),
                    w.requires_grad().then(|| gy.conv2d_weight(y, w.shape(), *pad)),
                ]
            }
            Op::Conv2dWeight { pad } => {
                // node = dW(x, y), shaped like a kernel
                let (x, y) = (&inputs[0], &inputs[1]);
                vec![
                    x.requires_grad()
                        .then(|| y.conv2d_transpose(gy, x.shape(), *pad)),
                    y.requires_grad().then(|| x.conv2d(gy, *pad)),
                ]
            }
            Op::PoolSum2 => vec![Some(gy.upsample2())],
            Op::Upsample2 => vec![Some(gy.pool_sum2())],
        }
    }
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        binary(self, other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> Var {
        binary(self, other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Var) -> Var {
        binary(self, other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Var) -> Var {
        binary(self, other, Op::Div, |a, b| a / b)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        unary(self, Op::AddScalar, |a| a + c)
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        unary(self, Op::MulScalar(c), |a| a * c)
    }

    pub fn exp(&self) -> Var {
        unary(self, Op::Exp, |a| a.mapv(f64::exp))
    }

    pub fn log(&self) -> Var {
        unary(self, Op::Log, |a| a.mapv(f64::ln))
    }

    pub fn sqrt(&self) -> Var {
        unary(self, Op::Sqrt, |a| a.mapv(f64::sqrt))
    }

    pub fn square(&self) -> Var {
        unary(self, Op::Square, |a| a.mapv(|v| v * v))
    }

    pub fn relu(&self) -> Var {
        unary(self, Op::Relu, |a| a.mapv(|v| v.max(0.0)))
    }

    pub fn abs(&self) -> Var {
        unary(self, Op::Abs, |a| a.mapv(f64::abs))
    }

    pub fn sigmoid(&self) -> Var {
        unary(self, Op::Sigmoid, |a| {
            a.mapv(|v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
        })
    }

    /// Sums broadcast dimensions away so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        let shape = shape.to_vec();
        unary(self, Op::SumTo, move |a| reduce_to(a, &shape))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        let shape = shape.to_vec();
        unary(self, Op::BroadcastTo, move |a| broadcast(a, &shape))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let shape = shape.to_vec();
        unary(self, Op::Reshape, move |a| {
            a.as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(&shape))
                .unwrap_or_else(|_| panic!("cannot reshape {:?} to {:?}", a.shape(), shape))
        })
    }

    pub fn sum(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var {
        let n = self.len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_keepdims(&self, axes: &[usize]) -> Var {
        let mut shape = self.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn mean_keepdims(&self, axes: &[usize]) -> Var {
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_keepdims(axes).mul_scalar(1.0 / count as f64)
    }

    pub fn matmul(&self, other: &Var) -> Var {
        binary(self, other, Op::MatMul, matmul_raw)
    }

    /// Matrix transpose.
    pub fn t(&self) -> Var {
        unary(self, Op::Transpose, |a| as2(a).t().to_owned().into_dyn())
    }

    pub fn conv2d(&self, weight: &Var, pad: usize) -> Var {
        binary(self, weight, Op::Conv2d { pad }, |x, w| conv::conv2d(x, w, pad))
    }

    pub fn conv2d_transpose(&self, weight: &Var, input_shape: &[usize], pad: usize) -> Var {
        let shape = input_shape.to_vec();
        binary(self, weight, Op::Conv2dTranspose { pad }, move |y, w| {
            conv::conv2d_transpose(y, w, &shape, pad)
        })
    }

    pub fn conv2d_weight(&self, out_grad: &Var, weight_shape: &[usize], pad: usize) -> Var {
        let shape = weight_shape.to_vec();
        binary(self, out_grad, Op::Conv2dWeight { pad }, move |x, y| {
            conv::conv2d_weight(x, y, &shape, pad)
        })
    }

    pub fn pool_sum2(&self) -> Var {
        unary(self, Op::PoolSum2, conv::pool_sum2)
    }

    pub fn avg_pool2(&self) -> Var {
        self.pool_sum2().mul_scalar(0.25)
    }

    pub fn upsample2(&self) -> Var {
        unary(self, Op::Upsample2, conv::upsample2)
    }

    /// Elementwise dot product summed to a scalar.
    pub fn dot(&self, other: &Var) -> Var {
        (self * other).sum()
    }
}

/// Raw (non-recording) helpers shared with tests.
pub fn zeros(shape: &[usize]) -> Tensor {
    ArrayD::zeros(IxDyn(shape))
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $call:ident) => {
        impl $trait<&Var> for &Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                Var::$call(self, rhs)
            }
        }
        impl $trait<Var> for Var {
            type Output = Var;
            fn $method(self, rhs: Var) -> Var {
                Var::$call(&self, &rhs)
            }
        }
        impl $trait<&Var> for Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                Var::$call(&self, rhs)
            }
        }
        impl $trait<Var> for &Var {
            type Output = Var;
            fn $method(self, rhs: Var) -> Var {
                Var::$call(self, &rhs)
            }
        }
    };
}

impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);
impl_binop!(Div, div, div);

impl Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        unary(self, Op::Neg, |a| -a)
    }
}

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        -&self
    }
}

impl Mul<f64> for &Var {
    type Output = Var;
    fn mul(self, rhs: f64) -> Var {
        self.mul_scalar(rhs)
    }
}

impl Mul<f64> for Var {
    type Output = Var;
    fn mul(self, rhs: f64) -> Var {
        self.mul_scalar(rhs)
    }
}

impl Add<f64> for &Var {
    type Output = Var;
    fn add(self, rhs: f64) -> Var {
        self.add_scalar(rhs)
    }
}

impl Add<f64> for Var {
    type Output = Var;
    fn add(self, rhs: f64) -> Var {
        self.add_scalar(rhs)
    }
}

#[cfg(test)]
mod tests {
    use crate::{grad, Var};
    use ndarray::{arr1, arr2};

    #[test]
    fn matmul_and_transpose_values() {
        let a = Var::constant(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = Var::constant(arr2(&[[0.0, 1.0], [1.0, 0.0]]).into_dyn());
        assert_eq!(a.matmul(&b).value(), &arr2(&[[2.0, 1.0], [4.0, 3.0]]).into_dyn());
        assert_eq!(a.t().value(), &arr2(&[[1.0, 3.0], [2.0, 4.0]]).into_dyn());
    }

    #[test]
    fn broadcasting_gradient_sums_back() {
        let b = Var::param(arr1(&[1.0, 2.0]).into_dyn());
        let x = Var::constant(arr2(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]).into_dyn());
        let y = x.add(&b.broadcast_to(&[3, 2]));
        let g = grad(&y.sum(), &[&b], false).remove(0);
        assert_eq!(g.value(), &arr1(&[3.0, 3.0]).into_dyn());
    }

    #[test]
    fn relu_and_sigmoid_derivatives() {
        let x = Var::param(arr1(&[-1.0, 0.5, 0.0]).into_dyn());
        let g = grad(&x.relu().sum(), &[&x], false).remove(0);
        assert_eq!(g.value(), &arr1(&[0.0, 1.0, 0.0]).into_dyn());
        let z = Var::param(arr1(&[0.0]).into_dyn());
        let g = grad(&z.sigmoid().sum(), &[&z], false).remove(0);
        assert!((g.item() - 0.25).abs() < 1e-15);
    }
}
