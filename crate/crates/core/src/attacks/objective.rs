//! Gradient-matching objective shared by the attacks and the shadow model.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use shadowdef_autograd::{grad, Tensor, Var};

use crate::error::{Error, Result};
use crate::fl::ClientUpdate;
use crate::models::task::{cross_entropy, BnMode, BnStats, TaskModel};
use crate::tensors::{var_refs, GradientSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// Squared L2 distance divided by the squared norm of the target.
    L2,
    /// One minus cosine similarity over all parameters.
    Cosine,
}

/// Difference operator as a `[len, len - stride_count]` matrix so that
/// `row @ D` lists every valid neighbour difference of a flattened `h x w`
/// plane. `vertical` pairs `(i, j)` with `(i + 1, j)`, otherwise `(i, j + 1)`.
fn difference_matrix(h: usize, w: usize, vertical: bool) -> Tensor {
    let pairs: Vec<(usize, usize)> = if vertical {
        (0..h - 1).flat_map(|i| (0..w).map(move |j| (i * w + j, (i + 1) * w + j))).collect()
    } else {
        (0..h).flat_map(|i| (0..w - 1).map(move |j| (i * w + j, i * w + j + 1))).collect()
    };
    let mut d = Array2::<f64>::zeros((h * w, pairs.len()));
    for (k, (a, b)) in pairs.into_iter().enumerate() {
        d[[b, k]] = 1.0;
        d[[a, k]] = -1.0;
    }
    d.into_dyn()
}

/// Anisotropic total variation of `[N, C, H, W]` images: the mean of
/// `|dh| + |dv|` over all valid neighbour pairs.
pub fn tv_var(x: &Var) -> Var {
    let s = x.shape().to_vec();
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let flat = x.reshape(&[nc, h * w]);
    let mut total = Var::scalar(0.0);
    let mut count = 0;
    if w > 1 {
        let d = flat.matmul(&Var::constant(difference_matrix(h, w, false)));
        count += d.len();
        total = total + d.abs().sum();
    }
    if h > 1 {
        let d = flat.matmul(&Var::constant(difference_matrix(h, w, true)));
        count += d.len();
        total = total + d.abs().sum();
    }
    if count == 0 {
        total
    } else {
        total.mul_scalar(1.0 / count as f64)
    }
}

/// Total variation of a single image `[C, H, W]` or a batch `[N, C, H, W]`.
pub fn tv_regularizer(image: &Tensor) -> f64 {
    let x = match image.ndim() {
        3 => image.clone().insert_axis(Axis(0)),
        _ => image.clone(),
    };
    tv_var(&Var::constant(x)).item()
}

/// `sum_l |mu_dummy - mu_target|^2 + |var_dummy - var_target|^2`
pub fn bn_regularizer_var(dummy: &[(Var, Var)], target: &BnStats) -> Result<Var> {
    if dummy.len() != target.layers.len() {
        return Err(Error::Protocol(format!(
            "{} dummy BN layers but {} target layers",
            dummy.len(),
            target.layers.len()
        )));
    }
    let mut total = Var::scalar(0.0);
    for ((mu, var), layer) in dummy.iter().zip(&target.layers) {
        if mu.len() != layer.mean.len() {
            return Err(Error::Protocol(format!(
                "layer {} has {} channels, dummy has {}",
                layer.name,
                layer.mean.len(),
                mu.len()
            )));
        }
        let tm = Var::constant(layer.mean.clone().into_dyn());
        let tv = Var::constant(layer.var.clone().into_dyn());
        total = total + (mu - &tm).square().sum() + (var - &tv).square().sum();
    }
    Ok(total)
}

pub fn bn_regularizer(dummy: &[(Array1<f64>, Array1<f64>)], target: &BnStats) -> Result<f64> {
    let vars: Vec<(Var, Var)> = dummy
        .iter()
        .map(|(m, v)| (Var::constant(m.clone().into_dyn()), Var::constant(v.clone().into_dyn())))
        .collect();
    Ok(bn_regularizer_var(&vars, target)?.item())
}

/// Distance between dummy gradients (graph values, in parameter-name order)
/// and a target gradient set.
pub fn gradient_distance(dummy: &[Var], target: &GradientSet, kind: Distance) -> Var {
    let mut dot = Var::scalar(0.0);
    let mut dd = Var::scalar(0.0);
    let mut tt = 0.0;
    for (g, t) in dummy.iter().zip(target.values()) {
        let tc = Var::constant(t.clone());
        dot = dot + g.dot(&tc);
        dd = dd + g.dot(g);
        tt += t.iter().map(|v| v * v).sum::<f64>();
    }
    match kind {
        Distance::L2 => {
            // |g - t|^2 / |t|^2 = (|g|^2 - 2 g.t + |t|^2) / |t|^2
            let scale = 1.0 / tt.max(1e-30);
            (dd - dot.mul_scalar(2.0)).add_scalar(tt).mul_scalar(scale)
        }
        Distance::Cosine => {
            let denom = dd.add_scalar(1e-30).sqrt().mul_scalar(tt.sqrt().max(1e-30));
            (dot / denom).mul_scalar(-1.0).add_scalar(1.0)
        }
    }
}

/// Parameter gradients of the training loss at `images` with the graph kept,
/// plus the per-layer batch statistics `(mean, biased var)`.
pub fn dummy_gradients(model: &TaskModel, images: &Var, labels: &[usize]) -> Result<(Vec<Var>, Vec<(Var, Var)>)> {
    let params = model.params.to_vars(true);
    let out = model.forward(&params, images, BnMode::Batch);
    let loss = cross_entropy(&out.logits, labels)?;
    let grads = grad(&loss, &var_refs(&params), true);
    Ok((grads, out.batch_stats))
}

/// Weights of the gradient-matching objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub distance: Distance,
    pub tv: f64,
    pub bn: f64,
    pub l2: f64,
}

/// Full matching loss for dummy images `[N, C, H, W]` in `[0, 1]`.
pub fn matching_loss(
    model: &TaskModel,
    images: &Var,
    labels: &[usize],
    target: &GradientSet,
    bn_target: Option<&BnStats>,
    w: &MatchWeights,
) -> Result<Var> {
    let (grads, stats) = dummy_gradients(model, images, labels)?;
    let mut loss = gradient_distance(&grads, target, w.distance);
    if w.tv > 0.0 {
        loss = loss + tv_var(images).mul_scalar(w.tv);
    }
    if w.bn > 0.0 {
        if let Some(t) = bn_target {
            loss = loss + bn_regularizer_var(&stats, t)?.mul_scalar(w.bn);
        }
    }
    if w.l2 > 0.0 {
        loss = loss + images.square().mean().mul_scalar(w.l2);
    }
    Ok(loss)
}

/// Per-step gradient implied by an update: the sum over local steps
/// divided by the step count.
pub fn per_step_gradient(update: &ClientUpdate) -> GradientSet {
    let mut g = update.gradients.clone();
    if update.local_steps > 1 {
        g.scale(1.0 / update.local_steps as f64);
    }
    g
}

/// Batch statistics implied by an upload: undoes `k` momentum steps from
/// the broadcast running statistics, assuming equal statistics per step,
/// and turns the unbiased running variance back into a biased one.
pub fn estimate_bn_target(update: &ClientUpdate, broadcast: &BnStats, resolution: usize) -> Result<BnStats> {
    update.bn_stats.check_compatible(broadcast)?;
    let k = update.local_steps.max(1) as i32;
    let keep = (1.0 - update.bn_stats.momentum).powi(k);
    let gain = 1.0 - keep;
    let mut out = update.bn_stats.clone();
    let mut side = resolution;
    let batch = update.batch_size.min(update.sample_count).max(1);
    for (layer, prior) in out.layers.iter_mut().zip(&broadcast.layers) {
        let count = (batch * side * side) as f64;
        let unbias = if count > 1.0 { (count - 1.0) / count } else { 1.0 };
        layer.mean = (&layer.mean - &(&prior.mean * keep)) / gain;
        layer.var = ((&layer.var - &(&prior.var * keep)) / gain * unbias).mapv(|v| v.max(0.0));
        side /= 2;
    }
    Ok(out)
}

/// Seeded Gaussian dummy images clamped to `[0, 1]`.
pub fn random_images(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.5f64, 0.25).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(rng).clamp(0.0, 1.0))
}
