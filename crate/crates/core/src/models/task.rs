//! The task classifier: a small conv net with batch normalization.

use ndarray::{Array1, ArrayD, IxDyn};
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use shadowdef_autograd::{grad, no_grad, Tensor, Var};

use crate::data::{stack_images, Sample};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensors::{var_refs, GradientSet, Tensors, VarMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskArch {
    pub in_channels: usize,
    pub resolution: usize,
    /// Output channels of each conv + BN + ReLU + 2x2 pooling block.
    pub widths: Vec<usize>,
    pub classes: usize,
    pub kernel: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Fixed input standardization, applied inside the network so callers
    /// always work with `[0, 1]` images.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

impl TaskArch {
    pub fn new(in_channels: usize, resolution: usize, classes: usize) -> Self {
        Self {
            in_channels,
            resolution,
            widths: vec![8, 16],
            classes,
            kernel: 3,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            input_mean: vec![0.0; in_channels],
            input_std: vec![1.0; in_channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("task model needs at least one conv block".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("task model needs at least two classes".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("conv kernel size must be odd".into()));
        }
        let div = 1usize << self.widths.len();
        if self.resolution < div || !self.resolution.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "resolution {} not divisible by 2^{} pooling",
                self.resolution,
                self.widths.len()
            )));
        }
        if self.input_mean.len() != self.in_channels || self.input_std.len() != self.in_channels {
            return Err(Error::Config("input normalization does not match channels".into()));
        }
        if self.input_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("input std must be positive".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::Config("BN momentum must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Length of the flattened feature vector fed to the classifier head.
    pub fn feature_dim(&self) -> usize {
        let side = self.resolution >> self.widths.len();
        self.widths.last().unwrap() * side * side
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        let mut prev = self.in_channels;
        for &w in &self.widths {
            count += w * prev * self.kernel * self.kernel + 2 * w;
            prev = w;
        }
        count + self.classes * self.feature_dim() + self.classes
    }

    pub fn bn_layer_names(&self) -> Vec<String> {
        (0..self.widths.len()).map(|i| format!("block{i}.bn")).collect()
    }

    pub fn conv_layer_names(&self) -> Vec<String> {
        (0..self.widths.len()).map(|i| format!("block{i}.conv")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnLayerStats {
    pub name: String,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Running statistics of every BN layer, in network order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub layers: Vec<BnLayerStats>,
    pub momentum: f64,
}

impl BnStats {
    pub fn check_compatible(&self, other: &BnStats) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Protocol(format!(
                "BN layer count mismatch: {} vs {}",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.name != b.name || a.mean.len() != b.mean.len() {
                return Err(Error::Protocol(format!(
                    "BN layer mismatch: {} vs {}",
                    a.name, b.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the statistics of the current batch (training).
    Batch,
    /// Normalize with the running statistics (inference).
    Running,
}

/// Everything a forward pass exposes.
pub struct ForwardPass {
    pub logits: Var,
    /// Per BN layer: batch mean and biased batch variance, each `[C]`.
    pub batch_stats: Vec<(Var, Var)>,
    /// Post-ReLU, pre-pooling output of each block, `[N, C, h, w]`.
    pub activations: Vec<Var>,
    /// Flattened input to the classifier head, `[N, F]`.
    pub embedding: Var,
}

/// A labelled image batch in network layout.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[N, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Batch {
        let samples: Vec<&Sample> = samples.into_iter().collect();
        Batch {
            images: stack_images(samples.iter().map(|s| &s.image)),
            labels: samples.iter().map(|s| s.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskModel {
    pub arch: TaskArch,
    pub params: Tensors,
    pub bn: BnStats,
}

fn reshape_channels(v: &Var) -> Var {
    let c = v.len();
    v.reshape(&[1, c, 1, 1])
}

/// Mean cross-entropy of `logits` `[N, K]` against integer labels.
pub fn cross_entropy(logits: &Var, labels: &[usize]) -> Result<Var> {
    let shape = logits.shape();
    let (n, k) = (shape[0], shape[1]);
    if n != labels.len() {
        return Err(Error::Data(format!("{n} logits rows but {} labels", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {l} out of range for {k} classes")));
    }
    let mut row_max = ArrayD::zeros(IxDyn(&[n, 1]));
    let mut onehot = ArrayD::zeros(IxDyn(&[n, k]));
    for (i, &l) in labels.iter().enumerate() {
        row_max[[i, 0]] = (0..k)
            .map(|j| logits.value()[[i, j]])
            .fold(f64::NEG_INFINITY, f64::max);
        onehot[[i, l]] = 1.0;
    }
    let z = logits - &Var::constant(row_max);
    let lse = z.exp().sum_keepdims(&[1]).log();
    let log_probs = &z - &lse;
    Ok((&log_probs * &Var::constant(onehot)).sum().mul_scalar(-1.0 / n as f64))
}

impl TaskModel {
    pub fn new(arch: TaskArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, &[tag::MODEL_INIT]);
        let mut params = Tensors::new();
        let mut prev = arch.in_channels;
        let k = arch.kernel;
        let mut layers = Vec::new();
        for (i, &w) in arch.widths.iter().enumerate() {
            let fan_in = (prev * k * k) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
            let weight = ArrayD::from_shape_fn(IxDyn(&[w, prev, k, k]), |_| normal.sample(&mut rng));
            params.insert(format!("block{i}.conv.weight"), weight);
            params.insert(format!("block{i}.bn.weight"), ArrayD::ones(IxDyn(&[w])));
            params.insert(format!("block{i}.bn.bias"), ArrayD::zeros(IxDyn(&[w])));
            layers.push(BnLayerStats {
                name: format!("block{i}.bn"),
                mean: Array1::zeros(w),
                var: Array1::ones(w),
            });
            prev = w;
        }
        let f = arch.feature_dim();
        let bound = 1.0 / (f as f64).sqrt();
        let uniform = Uniform::new(-bound, bound).unwrap();
        params.insert(
            "fc.weight",
            ArrayD::from_shape_fn(IxDyn(&[arch.classes, f]), |_| uniform.sample(&mut rng)),
        );
        params.insert(
            "fc.bias",
            ArrayD::from_shape_fn(IxDyn(&[arch.classes]), |_| uniform.sample(&mut rng)),
        );
        let bn = BnStats {
            layers,
            momentum: arch.bn_momentum,
        };
        Ok(Self { arch, params, bn })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Forward pass with externally supplied parameter handles, so callers
    /// choose what is differentiable.
    pub fn forward(&self, params: &VarMap, x: &Var, mode: BnMode) -> ForwardPass {
        let arch = &self.arch;
        let c = arch.in_channels;
        let mut h = if arch.input_mean.iter().any(|m| *m != 0.0) || arch.input_std.iter().any(|s| *s != 1.0) {
            let mean = ArrayD::from_shape_vec(IxDyn(&[1, c, 1, 1]), arch.input_mean.clone()).unwrap();
            let inv = ArrayD::from_shape_vec(
                IxDyn(&[1, c, 1, 1]),
                arch.input_std.iter().map(|s| 1.0 / s).collect(),
            )
            .unwrap();
            (x - &Var::constant(mean)) * Var::constant(inv)
        } else {
            x.clone()
        };
        let pad = arch.kernel / 2;
        let mut batch_stats = Vec::new();
        let mut activations = Vec::new();
        for i in 0..arch.widths.len() {
            let conv = h.conv2d(&params[&format!("block{i}.conv.weight")], pad);
            let gamma = reshape_channels(&params[&format!("block{i}.bn.weight")]);
            let beta = reshape_channels(&params[&format!("block{i}.bn.bias")]);
            let normed = match mode {
                BnMode::Batch => {
                    let mu = conv.mean_keepdims(&[0, 2, 3]);
                    let centered = &conv - &mu;
                    let var = centered.square().mean_keepdims(&[0, 2, 3]);
                    let w = arch.widths[i];
                    batch_stats.push((mu.reshape(&[w]), var.reshape(&[w])));
                    &centered / &var.add_scalar(arch.bn_eps).sqrt()
                }
                BnMode::Running => {
                    let layer = &self.bn.layers[i];
                    let w = layer.mean.len();
                    let mu = Var::constant(layer.mean.clone().into_shape_with_order(IxDyn(&[1, w, 1, 1])).unwrap());
                    let sd = Var::constant(
                        layer
                            .var
                            .mapv(|v| (v + arch.bn_eps).sqrt())
                            .into_shape_with_order(IxDyn(&[1, w, 1, 1]))
                            .unwrap(),
                    );
                    (&conv - &mu) / sd
                }
            };
            let act = (&normed * &gamma + &beta).relu();
            activations.push(act.clone());
            h = act.avg_pool2();
        }
        let n = x.shape()[0];
        let embedding = h.reshape(&[n, arch.feature_dim()]);
        let logits = embedding.matmul(&params["fc.weight"].t()) + &params["fc.bias"];
        ForwardPass {
            logits,
            batch_stats,
            activations,
            embedding,
        }
    }

    /// Mean cross-entropy of a batch in training mode.
    pub fn task_loss(&self, batch: &Batch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let _g = no_grad();
        let params = self.params.to_vars(false);
        let out = self.forward(&params, &Var::constant(batch.images.clone()), BnMode::Batch);
        Ok(cross_entropy(&out.logits, &batch.labels)?.item())
    }

    /// Exact parameter gradients of the training-mode loss plus the batch
    /// statistics each BN layer saw.
    pub fn gradients_with_stats(&self, batch: &Batch) -> Result<(GradientSet, Vec<(Array1<f64>, Array1<f64>)>)> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let params = self.params.to_vars(true);
        let out = self.forward(&params, &Var::constant(batch.images.clone()), BnMode::Batch);
        let loss = cross_entropy(&out.logits, &batch.labels)?;
        if !loss.item().is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", loss.item())));
        }
        let grads = grad(&loss, &var_refs(&params), false);
        let stats = out
            .batch_stats
            .iter()
            .map(|(m, v)| (to_array1(m.value()), to_array1(v.value())))
            .collect();
        Ok((Tensors::from_ordered(&self.params, grads), stats))
    }

    pub fn gradients(&self, batch: &Batch) -> Result<GradientSet> {
        Ok(self.gradients_with_stats(batch)?.0)
    }

    /// Snapshot of the running statistics.
    pub fn bn_statistics(&self) -> BnStats {
        self.bn.clone()
    }

    /// Momentum update of running statistics from one training batch. The
    /// running variance uses the unbiased batch variance.
    pub fn update_running_stats(&mut self, batch_stats: &[(Array1<f64>, Array1<f64>)], batch_len: usize) {
        let m = self.bn.momentum;
        let mut side = self.arch.resolution;
        for (layer, (mean, var)) in self.bn.layers.iter_mut().zip(batch_stats) {
            let count = (batch_len * side * side) as f64;
            let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            layer.mean = &layer.mean * (1.0 - m) + mean * m;
            layer.var = &layer.var * (1.0 - m) + &(var * (correction * m));
            side /= 2;
        }
    }

    /// Logits in inference mode.
    pub fn predict_logits(&self, images: &Tensor) -> Tensor {
        let _g = no_grad();
        let params = self.params.to_vars(false);
        self.forward(&params, &Var::constant(images.clone()), BnMode::Running)
            .logits
            .value()
            .clone()
    }

    /// Classifier-head inputs in inference mode, one row per image.
    pub fn embeddings(&self, images: &Tensor) -> Tensor {
        let _g = no_grad();
        let params = self.params.to_vars(false);
        self.forward(&params, &Var::constant(images.clone()), BnMode::Running)
            .embedding
            .value()
            .clone()
    }

    /// Post-ReLU block activations in inference mode.
    pub fn activations(&self, images: &Tensor) -> Vec<Tensor> {
        let _g = no_grad();
        let params = self.params.to_vars(false);
        self.forward(&params, &Var::constant(images.clone()), BnMode::Running)
            .activations
            .into_iter()
            .map(|v| v.value().clone())
            .collect()
    }
}

pub(crate) fn to_array1(t: &Tensor) -> Array1<f64> {
    Array1::from_iter(t.iter().copied())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;

    fn tiny_arch() -> TaskArch {
        TaskArch {
            widths: vec![2, 3],
            ..TaskArch::new(1, 8, 3)
        }
    }

    fn numeric_loss(model: &TaskModel, batch: &Batch) -> f64 {
        model.task_loss(batch).unwrap()
    }

    #[test]
    fn deterministic_construction() {
        let a = TaskModel::new(TaskArch::new(1, 16, 2), 3).unwrap();
        let b = TaskModel::new(TaskArch::new(1, 16, 2), 3).unwrap();
        assert_eq!(a, b);
        let c = TaskModel::new(TaskArch::new(1, 16, 2), 4).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn parameter_count_closed_form() {
        // conv 8*1*9 + bn 16, conv 16*8*9 + bn 32, fc 2*(16*4*4) + 2
        let m = TaskModel::new(TaskArch::new(1, 16, 2), 0).unwrap();
        assert_eq!(m.param_count(), 72 + 16 + 1152 + 32 + 512 + 2);
        assert_eq!(m.arch.param_count(), m.param_count());
        let m3 = TaskModel::new(TaskArch::new(3, 16, 4), 0).unwrap();
        assert_eq!(m3.param_count(), 216 + 16 + 1152 + 32 + 1024 + 4);
    }

    #[test]
    fn zero_image_gives_finite_logits() {
        let m = TaskModel::new(TaskArch::new(1, 16, 2), 0).unwrap();
        let logits = m.predict_logits(&ArrayD::zeros(IxDyn(&[1, 1, 16, 16])));
        assert!(logits.iter().all(|v| v.is_finite()));
        let batch = Batch {
            images: ArrayD::zeros(IxDyn(&[2, 1, 16, 16])),
            labels: vec![0, 1],
        };
        assert!(m.task_loss(&batch).unwrap().is_finite());
    }

    #[test]
    fn mismatched_spec_is_rejected() {
        assert!(TaskModel::new(TaskArch::new(1, 10, 2), 0).is_err());
        assert!(TaskModel::new(TaskArch::new(1, 16, 1), 0).is_err());
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Var::constant(ArrayD::from_elem(IxDyn(&[3, 4]), 0.7));
        let loss = cross_entropy(&logits, &[0, 1, 3]).unwrap().item();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_logits_give_zero_loss() {
        let mut l = ArrayD::zeros(IxDyn(&[2, 2]));
        l[[0, 0]] = 60.0;
        l[[1, 1]] = 60.0;
        let loss = cross_entropy(&Var::constant(l), &[0, 1]).unwrap().item();
        assert!(loss < 1e-20);
    }

    #[test]
    fn cross_entropy_matches_hand_formula() {
        let vals = [0.3, -1.2, 2.0, 0.1, 0.0, -0.4];
        let l = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vals.to_vec()).unwrap();
        let labels = [2usize, 1];
        let loss = cross_entropy(&Var::constant(l), &labels).unwrap().item();
        let mut expect = 0.0;
        for (r, &lab) in labels.iter().enumerate() {
            let row = &vals[r * 3..r * 3 + 3];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            expect -= (row[lab].exp() / denom).ln();
        }
        assert!((loss - expect / 2.0).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let l = Var::constant(ArrayD::zeros(IxDyn(&[1, 2])));
        assert!(matches!(cross_entropy(&l, &[2]), Err(Error::Data(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = TaskModel::new(tiny_arch(), 5).unwrap();
        assert!(model.param_count() < 500);
        let samples = generate_synthetic_dataset(3, 8, 1, 3, 1).unwrap();
        let batch = Batch::from_samples(&samples);
        let grads = model.gradients(&batch).unwrap();
        let eps = 1e-4;
        let mut worst = 0.0f64;
        for (name, g) in grads.iter() {
            for idx in 0..g.len() {
                let mut plus = model.clone();
                *plus.params.get_mut(name).unwrap().iter_mut().nth(idx).unwrap() += eps;
                let mut minus = model.clone();
                *minus.params.get_mut(name).unwrap().iter_mut().nth(idx).unwrap() -= eps;
                let fd = (numeric_loss(&plus, &batch) - numeric_loss(&minus, &batch)) / (2.0 * eps);
                let a = *g.iter().nth(idx).unwrap();
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn duplicated_sample_gives_same_gradient() {
        let model = TaskModel::new(TaskArch::new(1, 8, 2), 2).unwrap();
        let s = generate_synthetic_dataset(2, 8, 1, 2, 3).unwrap();
        let single = model.gradients(&Batch::from_samples([&s[0]])).unwrap();
        let double = model.gradients(&Batch::from_samples([&s[0], &s[0]])).unwrap();
        let diff = single.diff_scaled(&double, 1.0).max_abs();
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn zero_weight_head_bias_gradient_is_softmax_minus_onehot() {
        let mut model = TaskModel::new(TaskArch::new(1, 8, 3), 2).unwrap();
        model.params.get_mut("fc.weight").unwrap().fill(0.0);
        let bias = [0.2, -0.5, 1.0];
        model
            .params
            .get_mut("fc.bias")
            .unwrap()
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(&bias);
        let s = generate_synthetic_dataset(3, 8, 1, 3, 3).unwrap();
        let g = model.gradients(&Batch::from_samples([&s[0]])).unwrap();
        let denom: f64 = bias.iter().map(|b| b.exp()).sum();
        for (k, b) in bias.iter().enumerate() {
            let expect = b.exp() / denom - if k == s[0].label { 1.0 } else { 0.0 };
            assert!((g.get("fc.bias").unwrap()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn fresh_bn_statistics() {
        let m = TaskModel::new(TaskArch::new(1, 16, 2), 0).unwrap();
        let s = m.bn_statistics();
        for l in &s.layers {
            assert!(l.mean.iter().all(|v| *v == 0.0));
            assert!(l.var.iter().all(|v| *v == 1.0));
        }
    }

    #[test]
    fn running_mean_moves_by_momentum() {
        // constant image: first conv output per channel = c * sum(kernel) away
        // from borders; the batch mean is what the layer reports.
        let mut m = TaskModel::new(TaskArch::new(1, 8, 2), 0).unwrap();
        let batch = Batch {
            images: ArrayD::from_elem(IxDyn(&[1, 1, 8, 8]), 0.5),
            labels: vec![0],
        };
        let (_, stats) = m.gradients_with_stats(&batch).unwrap();
        let snapshot = m.bn_statistics();
        m.update_running_stats(&stats, 1);
        let expect = &stats[0].0 * 0.1;
        let diff = (&m.bn.layers[0].mean - &expect).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(diff < 1e-12);
        // the earlier snapshot is a copy
        assert!(snapshot.layers[0].mean.iter().all(|v| *v == 0.0));
        // independent value of the batch mean: tap (a, b) of a 3x3 kernel with
        // padding 1 overlaps 8 rows/cols when centred, 7 otherwise
        let w = m.params.get("block0.conv.weight").unwrap();
        for ch in 0..8 {
            let mut acc = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    let rows = if a == 1 { 8.0 } else { 7.0 };
                    let cols = if b == 1 { 8.0 } else { 7.0 };
                    acc += w[[ch, 0, a, b]] * rows * cols;
                }
            }
            let mean = 0.5 * acc / 64.0;
            assert!((stats[0].0[ch] - mean).abs() < 1e-12);
        }
    }
}
