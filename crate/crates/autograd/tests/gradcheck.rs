use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;
use shadowdef_autograd::{grad, Tensor, Var};

fn pseudo_random(shape: &[usize], seed: u64) -> Tensor {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Central finite differences of a scalar function of one tensor.
fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut g = Tensor::zeros(x.raw_dim());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.as_slice().unwrap()[i];
        xp.as_slice_mut().unwrap()[i] = orig + eps;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig - eps;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig;
        g.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let scale = b.iter().fold(1e-6_f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0, f64::max)
}

/// Small conv net touching every op: conv, pooling, upsampling, matmul,
/// broadcasting, and the elementwise nonlinearities.
fn composite(x: &Var, w: &Var, fc: &Var) -> Var {
    let h = x.conv2d(w, 1); // [1,3,4,4]
    let mu = h.mean_keepdims(&[0, 2, 3]);
    let centered = &h - &mu;
    let var = centered.square().mean_keepdims(&[0, 2, 3]);
    let normed = &centered / &var.add_scalar(1e-3).sqrt();
    let act = normed.sigmoid() + normed.relu() * 0.3;
    let pooled = act.avg_pool2(); // [1,3,2,2]
    let up = pooled.upsample2().abs().add_scalar(0.1).log(); // [1,3,4,4]
    let flat = up.reshape(&[1, 48]);
    let logits = flat.matmul(&fc.t()); // [1,2]
    let e = logits.exp();
    let p = &e / &e.sum_keepdims(&[1]);
    (-p.log().sum()).add(&(x.square().mean()))
}

#[test]
fn first_order_matches_finite_differences() {
    let x0 = pseudo_random(&[1, 2, 4, 4], 1);
    let w0 = pseudo_random(&[3, 2, 3, 3], 2);
    let fc0 = pseudo_random(&[2, 48], 3).mapv(|v| v * 0.2);

    let x = Var::param(x0.clone());
    let w = Var::param(w0.clone());
    let fc = Var::param(fc0.clone());
    let out = composite(&x, &w, &fc);
    let grads = grad(&out, &[&x, &w, &fc], false);

    let fx = |t: &Tensor| {
        composite(&Var::constant(t.clone()), &Var::constant(w0.clone()), &Var::constant(fc0.clone())).item()
    };
    let fw = |t: &Tensor| {
        composite(&Var::constant(x0.clone()), &Var::constant(t.clone()), &Var::constant(fc0.clone())).item()
    };
    let ffc = |t: &Tensor| {
        composite(&Var::constant(x0.clone()), &Var::constant(w0.clone()), &Var::constant(t.clone())).item()
    };
    for (g, num) in [
        (&grads[0], numeric_grad(&fx, &x0, 1e-5)),
        (&grads[1], numeric_grad(&fw, &w0, 1e-5)),
        (&grads[2], numeric_grad(&ffc, &fc0, 1e-5)),
    ] {
        let err = max_rel_err(g.value(), &num);
        assert!(err < 1e-5, "relative error {err}");
    }
}

/// f(x) = || d/dw composite(x, w) ||^2, differentiated in x.
fn grad_norm_objective(x: &Var, w: &Var, fc: &Var, create_graph: bool) -> Var {
    let out = composite(x, w, fc);
    let g = grad(&out, &[w, fc], create_graph);
    g[0].square().sum() + g[1].square().sum()
}

#[test]
fn second_order_matches_finite_differences() {
    let x0 = pseudo_random(&[1, 2, 4, 4], 4);
    let w0 = pseudo_random(&[3, 2, 3, 3], 5);
    let fc0 = pseudo_random(&[2, 48], 6).mapv(|v| v * 0.2);

    let x = Var::param(x0.clone());
    let w = Var::param(w0.clone());
    let fc = Var::param(fc0.clone());
    let obj = grad_norm_objective(&x, &w, &fc, true);
    let gx = grad(&obj, &[&x], false).remove(0);

    let f = |t: &Tensor| {
        let w = Var::param(w0.clone());
        let fc = Var::param(fc0.clone());
        grad_norm_objective(&Var::constant(t.clone()), &w, &fc, false).item()
    };
    let num = numeric_grad(&f, &x0, 1e-5);
    let err = max_rel_err(gx.value(), &num);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn conv_adjoint_identities() {
    // <conv(x,w), y> = <x, conv^T(y,w)> = <w, dW(x,y)>
    let x = Var::constant(pseudo_random(&[2, 3, 5, 6], 7));
    let w = Var::constant(pseudo_random(&[4, 3, 3, 3], 8));
    let y = Var::constant(pseudo_random(&[2, 4, 5, 6], 9));
    let lhs = x.conv2d(&w, 1).dot(&y).item();
    let mid = x.dot(&y.conv2d_transpose(&w, x.shape(), 1)).item();
    let rhs = w.dot(&x.conv2d_weight(&y, w.shape(), 1)).item();
    assert!((lhs - mid).abs() < 1e-10);
    assert!((lhs - rhs).abs() < 1e-10);
}

#[test]
fn unreachable_input_gets_zero_gradient() {
    let a = Var::param(pseudo_random(&[3], 1));
    let b = Var::param(pseudo_random(&[2, 2], 2));
    let out = a.square().sum();
    let g = grad(&out, &[&a, &b], false);
    assert_eq!(g[1].shape(), &[2, 2]);
    assert!(g[1].value().iter().all(|v| *v == 0.0));
}

#[test]
fn gradients_without_create_graph_are_constants() {
    let a = Var::param(pseudo_random(&[3], 1));
    let out = a.exp().sum();
    let g = grad(&out, &[&a], false);
    assert!(!g[0].requires_grad());
    let g = grad(&out, &[&a], true);
    assert!(g[0].requires_grad());
}

proptest! {
    #[test]
    fn pool_and_upsample_are_adjoint(seed in 0u64..1000) {
        let x = Var::constant(pseudo_random(&[1, 2, 4, 6], seed));
        let y = Var::constant(pseudo_random(&[1, 2, 2, 3], seed + 1));
        let lhs = x.pool_sum2().dot(&y).item();
        let rhs = x.dot(&y.upsample2()).item();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn broadcast_sum_to_are_adjoint(seed in 0u64..1000) {
        let x = Var::constant(pseudo_random(&[1, 3, 1], seed));
        let y = Var::constant(pseudo_random(&[2, 3, 4], seed + 7));
        let lhs = x.broadcast_to(&[2, 3, 4]).dot(&y).item();
        let rhs = x.dot(&y.sum_to(&[1, 3, 1])).item();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }
}
