//! First-order optimizers over flat lists of tensors.

use crate::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Plain gradient descent: `p -= lr * g`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        p.scaled_add(-lr, g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn first_adam_step_moves_by_lr_against_the_sign() {
        let mut p = [arr1(&[1.0, 1.0, 1.0]).into_dyn()];
        let g = [arr1(&[4.0, -0.01, 0.0]).into_dyn()];
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &g);
        assert!((p[0][0] - 0.9).abs() < 1e-6);
        assert!((p[0][1] - 1.1).abs() < 1e-4);
        assert_eq!(p[0][2], 1.0);
    }

    #[test]
    fn sgd_step_is_p_minus_lr_g() {
        let mut p = [arr1(&[1.0, -1.0]).into_dyn()];
        sgd_step(&mut p, &[arr1(&[2.0, 4.0]).into_dyn()], 0.5);
        assert_eq!(p[0], arr1(&[0.0, -3.0]).into_dyn());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = [arr1(&[3.0, -2.0]).into_dyn()];
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let g = p[0].mapv(|v| 2.0 * v);
            opt.step(&mut p, &[g]);
        }
        assert!(p[0].iter().all(|v| v.abs() < 1e-3));
    }
}
