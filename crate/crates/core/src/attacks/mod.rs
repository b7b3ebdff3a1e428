//! Honest-but-curious server attacks. Entry points receive only an upload,
//! the broadcast model and attacker-side resources.

pub mod labels;
pub mod objective;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use shadowdef_autograd::optim::Adam;
use shadowdef_autograd::{grad, Tensor, Var};

use crate::data::unstack_images;
use crate::error::{Error, Result};
use crate::fl::ClientUpdate;
use crate::models::generator::ShadowGenerator;
use crate::models::task::TaskModel;
use crate::rng::{self, tag};
use crate::tensors::{var_refs, Tensors};

pub use labels::{infer_labels, InferredLabels};
pub use objective::{
    bn_regularizer, estimate_bn_target, gradient_distance, matching_loss, tv_regularizer, Distance, MatchWeights,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Optimization,
    ModelBased,
}

/// Unset fields take the defaults of the attack's kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "AttackConfigDoc")]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Pixel iterations, or latent iterations for the model-based attack.
    pub iterations: usize,
    pub lr: f64,
    pub tv: f64,
    pub bn: f64,
    pub l2: f64,
    /// Defaults to L2 for the optimization attack and cosine otherwise.
    pub distance: Option<Distance>,
    pub restarts: usize,
    pub seed: u64,
    /// Generator fine-tuning iterations (model-based only).
    pub generator_iterations: usize,
    pub generator_lr: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::Optimization,
            iterations: 2000,
            lr: 0.1,
            tv: 1e-4,
            bn: 10.0,
            l2: 0.0,
            distance: None,
            restarts: 3,
            seed: 0,
            generator_iterations: 200,
            generator_lr: 1e-3,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AttackConfigDoc {
    #[serde(default = "default_kind")]
    kind: AttackKind,
    iterations: Option<usize>,
    lr: Option<f64>,
    tv: Option<f64>,
    bn: Option<f64>,
    l2: Option<f64>,
    distance: Option<Distance>,
    restarts: Option<usize>,
    seed: Option<u64>,
    generator_iterations: Option<usize>,
    generator_lr: Option<f64>,
}

fn default_kind() -> AttackKind {
    AttackKind::Optimization
}

impl From<AttackConfigDoc> for AttackConfig {
    fn from(d: AttackConfigDoc) -> Self {
        let base = match d.kind {
            AttackKind::Optimization => Self::default(),
            AttackKind::ModelBased => Self::model_based(),
        };
        Self {
            kind: d.kind,
            iterations: d.iterations.unwrap_or(base.iterations),
            lr: d.lr.unwrap_or(base.lr),
            tv: d.tv.unwrap_or(base.tv),
            bn: d.bn.unwrap_or(base.bn),
            l2: d.l2.unwrap_or(base.l2),
            distance: d.distance.or(base.distance),
            restarts: d.restarts.unwrap_or(base.restarts),
            seed: d.seed.unwrap_or(base.seed),
            generator_iterations: d.generator_iterations.unwrap_or(base.generator_iterations),
            generator_lr: d.generator_lr.unwrap_or(base.generator_lr),
        }
    }
}

impl AttackConfig {
    pub fn model_based() -> Self {
        Self {
            kind: AttackKind::ModelBased,
            iterations: 400,
            lr: 0.05,
            ..Self::default()
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            AttackKind::Optimization => "optimization",
            AttackKind::ModelBased => "model_based",
        }
    }

    pub fn distance(&self) -> Distance {
        self.distance.unwrap_or(match self.kind {
            AttackKind::Optimization => Distance::L2,
            AttackKind::ModelBased => Distance::Cosine,
        })
    }

    pub fn weights(&self) -> MatchWeights {
        MatchWeights {
            distance: self.distance(),
            tv: self.tv,
            bn: self.bn,
            l2: self.l2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("attack iterations must be at least 1".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("attack restarts must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.generator_lr > 0.0) {
            return Err(Error::Config("attack learning rates must be positive".into()));
        }
        if [self.tv, self.bn, self.l2].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("regularizer weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub kind: AttackKind,
    pub client_id: usize,
    pub round: usize,
    /// One `[C, H, W]` image per dummy-batch slot.
    pub reconstructions: Vec<Array3<f64>>,
    pub labels: InferredLabels,
    pub final_loss: f64,
    /// Best loss after latent search (model-based only).
    pub stage1_loss: Option<f64>,
    /// Best loss of each restart; `None` for restarts that diverged.
    pub restart_losses: Vec<Option<f64>>,
}

/// Learning-rate multiplier: 0.1 after 3/8, 0.01 after 5/8, 0.001 after 7/8.
fn lr_decay(it: usize, total: usize) -> f64 {
    let f = it as f64 / total as f64;
    if f >= 7.0 / 8.0 {
        1e-3
    } else if f >= 5.0 / 8.0 {
        1e-2
    } else if f >= 3.0 / 8.0 {
        1e-1
    } else {
        1.0
    }
}

/// Everything the objective needs, derived from the upload alone.
struct Target {
    gradients: Tensors,
    bn: Option<crate::models::task::BnStats>,
    labels: InferredLabels,
    n: usize,
}

fn prepare(update: &ClientUpdate, global: &TaskModel, cfg: &AttackConfig) -> Result<Target> {
    cfg.validate()?;
    global.params.check_compatible(&update.gradients)?;
    let n = update.batch_size.min(update.sample_count).max(1);
    let labels = infer_labels(update, n)?;
    let bn = if cfg.bn > 0.0 {
        Some(estimate_bn_target(update, &global.bn, global.arch.resolution)?)
    } else {
        None
    };
    Ok(Target {
        gradients: objective::per_step_gradient(update),
        bn,
        labels,
        n,
    })
}

fn image_shape(global: &TaskModel, n: usize) -> [usize; 4] {
    let a = &global.arch;
    [n, a.in_channels, a.resolution, a.resolution]
}

/// Pixel-space gradient matching with seeded restarts.
pub fn optimization_gia(update: &ClientUpdate, global: &TaskModel, cfg: &AttackConfig) -> Result<AttackResult> {
    let target = prepare(update, global, cfg)?;
    let w = cfg.weights();
    let shape = image_shape(global, target.n);
    let mut best: Option<(f64, Tensor)> = None;
    let mut restart_losses = Vec::with_capacity(cfg.restarts);
    for restart in 0..cfg.restarts {
        let mut rng = rng::stream(
            cfg.seed,
            &[tag::ATTACK, update.client_id as u64, update.round as u64, restart as u64],
        );
        let mut x = objective::random_images(&shape, &mut rng);
        let mut opt = Adam::new(cfg.lr);
        let mut run_best: Option<(f64, Tensor)> = None;
        let mut diverged = false;
        for it in 0..cfg.iterations {
            let xv = Var::param(x.clone());
            let loss = matching_loss(global, &xv, &target.labels.labels, &target.gradients, target.bn.as_ref(), &w)?;
            let value = loss.item();
            if !value.is_finite() {
                log::warn!("restart {restart} diverged at iteration {it}");
                diverged = true;
                break;
            }
            if run_best.as_ref().is_none_or(|(b, _)| value < *b) {
                run_best = Some((value, x.clone()));
            }
            let g = grad(&loss, &[&xv], false).remove(0).value().clone();
            opt.lr = cfg.lr * lr_decay(it, cfg.iterations);
            let mut p = [x];
            opt.step(&mut p, &[g]);
            let [px] = p;
            x = px.mapv(|v| v.clamp(0.0, 1.0));
        }
        match run_best {
            Some((l, img)) if !diverged || l.is_finite() => {
                restart_losses.push(Some(l));
                if best.as_ref().is_none_or(|(b, _)| l < *b) {
                    best = Some((l, img));
                }
            }
            _ => restart_losses.push(None),
        }
    }
    let (final_loss, images) = best.ok_or_else(|| {
        Error::Attack(format!(
            "all {} restarts diverged for client {} round {}",
            cfg.restarts, update.client_id, update.round
        ))
    })?;
    Ok(AttackResult {
        kind: AttackKind::Optimization,
        client_id: update.client_id,
        round: update.round,
        reconstructions: unstack_images(&images),
        labels: target.labels,
        final_loss,
        stage1_loss: None,
        restart_losses,
    })
}

/// Generator-prior attack: latent search with the generator frozen, then
/// generator fine-tuning from the best latent.
pub fn model_gia(
    update: &ClientUpdate,
    global: &TaskModel,
    generator: &ShadowGenerator,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    model_gia_from(update, global, generator, cfg, None)
}

/// As [`model_gia`], optionally starting every restart from `init_z`.
pub fn model_gia_from(
    update: &ClientUpdate,
    global: &TaskModel,
    generator: &ShadowGenerator,
    cfg: &AttackConfig,
    init_z: Option<&Tensor>,
) -> Result<AttackResult> {
    let target = prepare(update, global, cfg)?;
    let ga = &generator.arch;
    let want = image_shape(global, 1);
    if [ga.out_channels, ga.resolution, ga.resolution] != [want[1], want[2], want[3]] {
        return Err(Error::Config("attacker generator does not match the task image shape".into()));
    }
    let w = cfg.weights();
    let labels = &target.labels.labels;
    let eval = |gen: &ShadowGenerator, m: &crate::tensors::VarMap, g: &crate::tensors::VarMap, z: &Var| {
        let images = gen.generate_vars(m, g, z);
        matching_loss(global, &images, labels, &target.gradients, target.bn.as_ref(), &w)
    };

    // stage 1: latents only
    let mut best: Option<(f64, Tensor)> = None;
    let mut restart_losses = Vec::with_capacity(cfg.restarts);
    let mapper = generator.mapper.to_vars(false);
    let decoder = generator.generator.to_vars(false);
    for restart in 0..cfg.restarts {
        let mut z = match init_z {
            Some(z) => z.clone(),
            None => generator.sample_latents(
                target.n,
                rng::derive_seed(
                    cfg.seed,
                    &[tag::ATTACK, update.client_id as u64, update.round as u64, restart as u64],
                ),
            ),
        };
        let mut opt = Adam::new(cfg.lr);
        let mut run_best: Option<(f64, Tensor)> = None;
        for it in 0..cfg.iterations {
            let zv = Var::param(z.clone());
            let loss = eval(generator, &mapper, &decoder, &zv)?;
            let value = loss.item();
            if !value.is_finite() {
                log::warn!("latent restart {restart} diverged at iteration {it}");
                break;
            }
            if run_best.as_ref().is_none_or(|(b, _)| value < *b) {
                run_best = Some((value, z.clone()));
            }
            let g = grad(&loss, &[&zv], false).remove(0).value().clone();
            opt.lr = cfg.lr * lr_decay(it, cfg.iterations);
            let mut p = [z];
            opt.step(&mut p, &[g]);
            let [pz] = p;
            z = pz;
        }
        restart_losses.push(run_best.as_ref().map(|(l, _)| *l));
        if let Some((l, zb)) = run_best {
            if best.as_ref().is_none_or(|(b, _)| l < *b) {
                best = Some((l, zb));
            }
        }
    }
    let (stage1, z) = best.ok_or_else(|| {
        Error::Attack(format!(
            "all {} latent restarts diverged for client {} round {}",
            cfg.restarts, update.client_id, update.round
        ))
    })?;

    // stage 2: generator weights from the best latent
    let zc = Var::constant(z.clone());
    let mut gen = generator.clone();
    let mut best_gen = (stage1, gen.clone());
    let mut opt = Adam::new(cfg.generator_lr);
    for it in 0..cfg.generator_iterations {
        let m = gen.mapper.to_vars(true);
        let g = gen.generator.to_vars(true);
        let loss = eval(&gen, &m, &g, &zc)?;
        let value = loss.item();
        if !value.is_finite() {
            log::warn!("generator fine-tuning diverged at iteration {it}");
            break;
        }
        if value < best_gen.0 {
            best_gen = (value, gen.clone());
        }
        let mut handles = var_refs(&m);
        handles.extend(var_refs(&g));
        let grads: Vec<Tensor> = grad(&loss, &handles, false)
            .into_iter()
            .map(|v| v.value().clone())
            .collect();
        let mut params: Vec<Tensor> = gen.mapper.values().chain(gen.generator.values()).cloned().collect();
        opt.lr = cfg.generator_lr * lr_decay(it, cfg.generator_iterations);
        opt.step(&mut params, &grads);
        let mut it_p = params.into_iter();
        for (_, t) in gen.mapper.iter_mut() {
            *t = it_p.next().unwrap();
        }
        for (_, t) in gen.generator.iter_mut() {
            *t = it_p.next().unwrap();
        }
    }
    let (final_loss, gen) = best_gen;
    Ok(AttackResult {
        kind: AttackKind::ModelBased,
        client_id: update.client_id,
        round: update.round,
        reconstructions: unstack_images(&gen.generate(&z)),
        labels: target.labels,
        final_loss,
        stage1_loss: Some(stage1),
        restart_losses,
    })
}

/// Dispatches on the configured kind.
pub fn run_attack(
    update: &ClientUpdate,
    global: &TaskModel,
    generator: Option<&ShadowGenerator>,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    match cfg.kind {
        AttackKind::Optimization => optimization_gia(update, global, cfg),
        AttackKind::ModelBased => {
            let g = generator.ok_or_else(|| Error::Config("model-based attack needs an attacker generator".into()))?;
            model_gia(update, global, g, cfg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, ClientDataset};
    use crate::fl::{local_train, LocalTrainConfig};
    use crate::models::generator::GeneratorArch;
    use crate::models::task::{Batch, TaskArch};

    fn single_update(model: &TaskModel, image: Tensor, label: usize) -> ClientUpdate {
        let sample = crate::data::Sample {
            image: image.into_dimensionality().unwrap(),
            label,
            id: 0,
        };
        let client = ClientDataset {
            client_id: 9,
            samples: vec![sample],
            batch_size: 1,
        };
        local_train(model, &client, &LocalTrainConfig { lr: 0.1, local_rounds: 1 }, 0, 1)
            .unwrap()
            .1
    }

    #[test]
    fn matching_loss_vanishes_at_the_true_image() {
        let model = TaskModel::new(TaskArch::new(1, 8, 2), 1).unwrap();
        let s = generate_synthetic_dataset(2, 8, 1, 2, 5).unwrap()[..1].to_vec();
        let batch = Batch::from_samples(&s);
        let img = batch.images.index_axis(ndarray::Axis(0), 0).to_owned();
        let u = single_update(&model, img, s[0].label);
        let cfg = AttackConfig { tv: 0.0, bn: 0.0, ..AttackConfig::default() };
        let t = prepare(&u, &model, &cfg).unwrap();
        let loss = matching_loss(&model, &Var::param(batch.images.clone()), &t.labels.labels, &t.gradients, None, &cfg.weights());
        assert!(loss.unwrap().item().abs() < 1e-10);
    }

    /// Generator-produced truth, latent initialised at the truth: nothing moves.
    #[test]
    fn model_attack_is_stationary_at_the_truth() {
        let model = TaskModel::new(TaskArch::new(1, 8, 2), 2).unwrap();
        let gen = ShadowGenerator::new(GeneratorArch::new(1, 8), 3).unwrap();
        let z = gen.sample_latents(1, 4);
        let truth = gen.generate(&z);
        let img = truth.index_axis(ndarray::Axis(0), 0).to_owned();
        let u = single_update(&model, img.clone(), 1);
        let cfg = AttackConfig {
            iterations: 3,
            generator_iterations: 3,
            restarts: 1,
            tv: 0.0,
            bn: 0.0,
            ..AttackConfig::model_based()
        };
        let r = model_gia_from(&u, &model, &gen, &cfg, Some(&z)).unwrap();
        assert!(r.final_loss.abs() < 1e-10 && r.stage1_loss.unwrap().abs() < 1e-10);
        let diff = (&r.reconstructions[0] - &img.into_dimensionality::<ndarray::Ix3>().unwrap())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12);
    }

    #[test]
    fn stage_two_never_worsens_stage_one() {
        let model = TaskModel::new(TaskArch::new(1, 8, 2), 2).unwrap();
        let gen = ShadowGenerator::new(GeneratorArch::new(1, 8), 3).unwrap();
        for seed in 0..3 {
            let s = generate_synthetic_dataset(2, 8, 1, 2, seed).unwrap()[..1].to_vec();
            let img = Batch::from_samples(&s).images.index_axis(ndarray::Axis(0), 0).to_owned();
            let u = single_update(&model, img, s[0].label);
            let cfg = AttackConfig {
                iterations: 15,
                generator_iterations: 15,
                restarts: 2,
                seed,
                ..AttackConfig::model_based()
            };
            let r = model_gia(&u, &model, &gen, &cfg).unwrap();
            assert!(r.final_loss <= r.stage1_loss.unwrap());
        }
    }

    #[test]
    fn optimization_attack_reduces_the_loss() {
        let model = TaskModel::new(TaskArch::new(1, 8, 2), 2).unwrap();
        let s = generate_synthetic_dataset(2, 8, 1, 2, 1).unwrap()[..1].to_vec();
        let img = Batch::from_samples(&s).images.index_axis(ndarray::Axis(0), 0).to_owned();
        let u = single_update(&model, img, s[0].label);
        let short = AttackConfig { iterations: 1, restarts: 1, ..AttackConfig::default() };
        let long = AttackConfig { iterations: 60, restarts: 1, ..AttackConfig::default() };
        let a = optimization_gia(&u, &model, &short).unwrap();
        let b = optimization_gia(&u, &model, &long).unwrap();
        assert!(b.final_loss < a.final_loss);
        assert_eq!(b.reconstructions.len(), 1);
        assert!(b.reconstructions[0].iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn documents_take_the_defaults_of_their_kind() {
        let m: AttackConfig = serde_json::from_str(r#"{"kind": "model_based", "restarts": 1}"#).unwrap();
        assert_eq!(m, AttackConfig { restarts: 1, ..AttackConfig::model_based() });
        let o: AttackConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(o, AttackConfig::default());
        let back: AttackConfig = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<AttackConfig>(r#"{"iters": 3}"#).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let model = TaskModel::new(TaskArch::new(1, 8, 2), 2).unwrap();
        let u = single_update(&model, ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 8, 8])), 0);
        let cfg = AttackConfig { iterations: 0, ..AttackConfig::default() };
        assert!(matches!(optimization_gia(&u, &model, &cfg), Err(Error::Config(_))));
        assert!(run_attack(&u, &model, None, &AttackConfig::model_based()).is_err());
    }
}
