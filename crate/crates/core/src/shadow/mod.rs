//! Shadow-model defense: a client-side generator fine-tuned each round to
//! imitate an attacker, whose reconstruction errors shape additive image
//! noise.

pub mod noise;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use shadowdef_autograd::optim::Adam;
use shadowdef_autograd::{grad, Tensor, Var};

use crate::attacks::objective::{
    bn_regularizer_var, dummy_gradients, estimate_bn_target, gradient_distance, per_step_gradient, tv_var, Distance,
};
use crate::data::{broadcast_map, stack_images, unstack_images, ClientDataset};
use crate::error::{Error, Result};
use crate::fl::{local_train, ClientTrainer, ClientUpdate, LocalTrainConfig, RoundContext};
use crate::models::generator::ShadowGenerator;
use crate::models::saliency::cam_saliency;
use crate::models::task::{Batch, TaskModel};
use crate::rng;
use crate::tensors::{var_refs, Tensors};

pub use noise::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShadowLossWeights {
    pub w_dist: f64,
    pub w_tv: f64,
    pub w_bn: f64,
    pub w_l2: f64,
    pub w_mse: f64,
}

impl Default for ShadowLossWeights {
    fn default() -> Self {
        Self {
            w_dist: 1.0,
            w_tv: 1e-2,
            w_bn: 1e-2,
            w_l2: 1e-4,
            w_mse: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShadowConfig {
    /// Last round with shadow fine-tuning; `None` means `ceil(0.2 * R)`.
    pub r_shadow: Option<usize>,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub latent_steps: usize,
    pub latent_lr: f64,
    pub early_stop: usize,
    pub ema_alpha_shadow: f64,
    pub ema_alpha_noise: f64,
    pub alpha_n: f64,
    pub alpha_cam_min: f64,
    pub alpha_cam_max: f64,
    pub temperature: f64,
    pub top_fraction: f64,
    pub schedule: Schedule,
    pub weights: ShadowLossWeights,
    /// Saliency layer; `None` means the last conv block.
    pub cam_layer: Option<String>,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        Self {
            r_shadow: None,
            finetune_epochs: 5,
            finetune_lr: 1e-3,
            latent_steps: 300,
            latent_lr: 0.05,
            early_stop: 5,
            ema_alpha_shadow: 0.5,
            ema_alpha_noise: 0.9,
            alpha_n: 0.19,
            alpha_cam_min: 0.1,
            alpha_cam_max: 0.5,
            temperature: 0.5,
            top_fraction: 0.3,
            schedule: Schedule::Increase,
            weights: ShadowLossWeights::default(),
            cam_layer: None,
        }
    }
}

impl ShadowConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.ema_alpha_shadow) || !unit(self.ema_alpha_noise) {
            return Err(Error::Config("EMA coefficients must lie in [0, 1]".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::Config("top_fraction must lie in (0, 1]".into()));
        }
        if !(self.alpha_n >= 0.0) || self.alpha_cam_min > self.alpha_cam_max {
            return Err(Error::Config("noise coefficients out of range".into()));
        }
        let w = &self.weights;
        if !(w.w_dist > 0.0) || [w.w_tv, w.w_bn, w.w_l2, w.w_mse].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("shadow loss weights must be non-negative with w_dist > 0".into()));
        }
        if !(self.finetune_lr > 0.0) || !(self.latent_lr > 0.0) {
            return Err(Error::Config("shadow learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn terminal_round(&self, total_rounds: usize) -> usize {
        self.r_shadow
            .unwrap_or_else(|| (0.2 * total_rounds as f64).ceil() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowState {
    pub generator: ShadowGenerator,
    /// Latent code per sample id.
    pub latents: BTreeMap<u64, Array1<f64>>,
    pub ema_alpha_shadow: f64,
    pub r_shadow: usize,
    pub finetune_epochs: usize,
    pub last_reconstructions: BTreeMap<u64, Array3<f64>>,
}

impl ShadowState {
    pub fn new(generator: ShadowGenerator, ema_alpha_shadow: f64, r_shadow: usize, finetune_epochs: usize) -> Self {
        Self {
            generator,
            latents: BTreeMap::new(),
            ema_alpha_shadow,
            r_shadow,
            finetune_epochs,
            last_reconstructions: BTreeMap::new(),
        }
    }

    /// Latents of `client`'s samples stacked `[n, latent_dim]`.
    fn stacked_latents(&self, client: &ClientDataset) -> Result<Tensor> {
        let d = self.generator.arch.latent_dim;
        let mut z = Tensor::zeros(ndarray::IxDyn(&[client.len(), d]));
        for (i, s) in client.samples.iter().enumerate() {
            let l = self
                .latents
                .get(&s.id)
                .ok_or_else(|| Error::Precondition(format!("sample {} has no latent code", s.id)))?;
            z.index_axis_mut(Axis(0), i).assign(l);
        }
        Ok(z)
    }

    /// Images the current generator makes for `client`'s latents.
    pub fn reconstruct(&self, client: &ClientDataset) -> Result<Vec<Array3<f64>>> {
        Ok(unstack_images(&self.generator.generate(&self.stacked_latents(client)?)))
    }
}

/// Noise maps of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleNoise {
    pub n1: Array2<f64>,
    pub n2: Array2<f64>,
    pub n3: Array2<f64>,
    pub n4: Array2<f64>,
    pub n: Array2<f64>,
    pub l_cam: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct NoiseState {
    pub samples: BTreeMap<u64, SampleNoise>,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentReport {
    pub losses: Vec<f64>,
    pub steps_run: usize,
}

fn per_sample_mse(images: &Var, target: &Var, n: usize) -> Var {
    // mean over pixels for each sample, summed over samples
    (images - target).square().mean().mul_scalar(n as f64)
}

/// Fits one latent per sample to its image with the generator frozen.
/// Stops after `early_stop` steps without improvement and keeps the best.
pub fn pretrain_latents(
    state: &ShadowState,
    client: &ClientDataset,
    steps: usize,
    early_stop: usize,
    lr: f64,
    seed: u64,
) -> Result<(ShadowState, LatentReport)> {
    let mut out = state.clone();
    let gen = &state.generator;
    let init = gen.sample_latents(client.len(), rng::derive_seed(seed, &[client.client_id as u64]));
    for (i, s) in client.samples.iter().enumerate() {
        out.latents
            .entry(s.id)
            .or_insert_with(|| init.index_axis(Axis(0), i).to_owned().into_dimensionality().unwrap());
    }
    let mut z = out.stacked_latents(client)?;
    let target = Var::constant(stack_images(client.samples.iter().map(|s| &s.image)));
    let mapper = gen.mapper.to_vars(false);
    let decoder = gen.generator.to_vars(false);
    let mut opt = Adam::new(lr);
    let mut losses = Vec::new();
    let mut best = (f64::INFINITY, z.clone());
    let mut stale = 0;
    for _ in 0..steps {
        let zv = Var::param(z.clone());
        let loss = per_sample_mse(&gen.generate_vars(&mapper, &decoder, &zv), &target, client.len());
        let value = loss.item();
        if !value.is_finite() || value > 1e3 {
            return Err(Error::Training(format!("latent fitting diverged (loss {value})")));
        }
        losses.push(value);
        if value < best.0 {
            best = (value, z.clone());
            stale = 0;
        } else {
            stale += 1;
            if early_stop > 0 && stale >= early_stop {
                break;
            }
        }
        let g = grad(&loss, &[&zv], false).remove(0).value().clone();
        let mut p = [z];
        opt.step(&mut p, &[g]);
        let [pz] = p;
        z = pz;
    }
    if !losses.is_empty() {
        for (i, s) in client.samples.iter().enumerate() {
            out.latents.insert(s.id, best.1.index_axis(Axis(0), i).to_owned().into_dimensionality().unwrap());
        }
    }
    let steps_run = losses.len();
    Ok((out, LatentReport { losses, steps_run }))
}

/// Clean local training on a copy of the broadcast model.
pub fn pseudo_local_train(
    global: &TaskModel,
    client: &ClientDataset,
    cfg: &LocalTrainConfig,
    seed: u64,
    round: usize,
) -> Result<(TaskModel, ClientUpdate)> {
    local_train(global, client, cfg, seed, round)
}

/// Scalar shadow objective at the images `x_s` (graph kept).
pub fn shadow_loss(
    global: &TaskModel,
    x_s: &Var,
    client: &ClientDataset,
    victim: &ClientUpdate,
    w: &ShadowLossWeights,
) -> Result<Var> {
    let labels: Vec<usize> = client.samples.iter().map(|s| s.label).collect();
    let (grads, stats) = dummy_gradients(global, x_s, &labels)?;
    let target = per_step_gradient(victim);
    let mut loss = gradient_distance(&grads, &target, Distance::Cosine).mul_scalar(w.w_dist);
    if w.w_tv > 0.0 {
        loss = loss + tv_var(x_s).mul_scalar(w.w_tv);
    }
    if w.w_bn > 0.0 {
        let bn = estimate_bn_target(victim, &global.bn, global.arch.resolution)?;
        loss = loss + bn_regularizer_var(&stats, &bn)?.mul_scalar(w.w_bn);
    }
    if w.w_l2 > 0.0 {
        loss = loss + x_s.square().mean().mul_scalar(w.w_l2);
    }
    if w.w_mse > 0.0 {
        let x = Var::constant(stack_images(client.samples.iter().map(|s| &s.image)));
        loss = loss + (x_s - &x).square().mean().mul_scalar(w.w_mse);
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finetuned {
    /// Fine-tuned decoder parameters.
    pub generator: Tensors,
    pub reconstructions: Vec<Array3<f64>>,
    /// Loss before each epoch's update.
    pub losses: Vec<f64>,
}

/// Fine-tunes only the decoder, with latents and mapper frozen.
#[allow(clippy::too_many_arguments)]
pub fn finetune_shadow(
    state: &ShadowState,
    victim: &ClientUpdate,
    client: &ClientDataset,
    global: &TaskModel,
    weights: &ShadowLossWeights,
    lr: f64,
    round: usize,
) -> Result<Finetuned> {
    if round > state.r_shadow {
        return Err(Error::Precondition(format!(
            "shadow fine-tuning requested at round {round} after the terminal round {}",
            state.r_shadow
        )));
    }
    let gen = &state.generator;
    let z = Var::constant(state.stacked_latents(client)?);
    let mapper = gen.mapper.to_vars(false);
    let mut params = gen.generator.clone();
    let mut opt = Adam::new(lr);
    let mut losses = Vec::with_capacity(state.finetune_epochs);
    for epoch in 0..state.finetune_epochs {
        let decoder = params.to_vars(true);
        let x_s = gen.generate_vars(&mapper, &decoder, &z);
        let loss = shadow_loss(global, &x_s, client, victim, weights)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Training(format!(
                "shadow loss not finite at epoch {epoch} (client {})",
                client.client_id
            )));
        }
        losses.push(value);
        let grads: Vec<Tensor> = grad(&loss, &var_refs(&decoder), false)
            .into_iter()
            .map(|v| v.value().clone())
            .collect();
        let mut flat: Vec<Tensor> = params.values().cloned().collect();
        opt.step(&mut flat, &grads);
        for ((_, t), p) in params.iter_mut().zip(flat) {
            *t = p;
        }
    }
    let tuned = ShadowGenerator {
        generator: params.clone(),
        ..gen.clone()
    };
    let reconstructions = unstack_images(&tuned.generate(z.value()));
    Ok(Finetuned {
        generator: params,
        reconstructions,
        losses,
    })
}

/// `theta_gen <- alpha * theta_gen + (1 - alpha) * theta_gen'`
pub fn ema_shadow(state: &ShadowState, tuned: &Tensors) -> Result<ShadowState> {
    state.generator.generator.check_compatible(tuned)?;
    let a = state.ema_alpha_shadow;
    let mut out = state.clone();
    for ((_, t), (_, p)) in out.generator.generator.iter_mut().zip(tuned.iter()) {
        *t = &*t * a + p * (1.0 - a);
    }
    Ok(out)
}

/// The noise maps for one image given its reconstruction and saliency map.
#[allow(clippy::too_many_arguments)]
pub fn noise_for_sample(
    cfg: &ShadowConfig,
    x: &Array3<f64>,
    x_rec: &Array3<f64>,
    l_cam: Array2<f64>,
    prev_n3: Option<&Array2<f64>>,
    r: usize,
    total: usize,
) -> SampleNoise {
    let n1 = noise::relative_noise(x, x_rec, cfg.temperature);
    let n2 = noise::equalize_noise(&n1);
    let n3 = noise::ema_noise(prev_n3, &n2, cfg.ema_alpha_noise);
    let a = noise::alpha_cam(r, total, cfg.alpha_cam_min, cfg.alpha_cam_max);
    let n4 = noise::attenuate_foreground(&n3, &l_cam, a);
    let w = noise::noise_weight(cfg.schedule, cfg.alpha_n, r, total);
    let x_max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = noise::scale_noise(&n4, x_max, w);
    SampleNoise { n1, n2, n3, n4, n, l_cam }
}

/// Client trainer running the full shadow pipeline every round.
pub struct ShadowTrainer {
    pub config: ShadowConfig,
    pub state: ShadowState,
    pub noise: NoiseState,
    seed: u64,
    /// Shadow loss per fine-tuning epoch, per round.
    pub finetune_losses: BTreeMap<usize, Vec<f64>>,
}

impl ShadowTrainer {
    pub fn new(config: ShadowConfig, generator: ShadowGenerator, seed: u64) -> Result<Self> {
        config.validate()?;
        let state = ShadowState::new(generator, config.ema_alpha_shadow, 0, config.finetune_epochs);
        Ok(Self {
            config,
            state,
            noise: NoiseState::default(),
            seed,
            finetune_losses: BTreeMap::new(),
        })
    }

    /// One defended round: returns the protected update and the noised images.
    pub fn defend_round(
        &mut self,
        ctx: &RoundContext,
        client: &ClientDataset,
        global: &TaskModel,
    ) -> Result<(ClientUpdate, ClientDataset)> {
        let (r, total) = (ctx.round, ctx.total_rounds);
        self.state.r_shadow = self.config.terminal_round(total);
        if client.samples.iter().any(|s| !self.state.latents.contains_key(&s.id)) {
            let (st, rep) = pretrain_latents(
                &self.state,
                client,
                self.config.latent_steps,
                self.config.early_stop,
                self.config.latent_lr,
                self.seed,
            )?;
            log::debug!("client {}: latents fitted in {} steps", client.client_id, rep.steps_run);
            self.state = st;
        }
        let (pseudo, victim) = pseudo_local_train(global, client, &ctx.train, ctx.seed, r)?;

        let recons = if r <= self.state.r_shadow {
            let ft = finetune_shadow(
                &self.state,
                &victim,
                client,
                global,
                &self.config.weights,
                self.config.finetune_lr,
                r,
            )?;
            self.finetune_losses.insert(r, ft.losses.clone());
            self.state = ema_shadow(&self.state, &ft.generator)?;
            ft.reconstructions
        } else if client.samples.iter().all(|s| self.state.last_reconstructions.contains_key(&s.id)) {
            client
                .samples
                .iter()
                .map(|s| self.state.last_reconstructions[&s.id].clone())
                .collect()
        } else {
            self.state.reconstruct(client)?
        };
        for (s, rec) in client.samples.iter().zip(&recons) {
            self.state.last_reconstructions.insert(s.id, rec.clone());
        }

        let layer = self
            .config
            .cam_layer
            .clone()
            .unwrap_or_else(|| format!("block{}", global.arch.widths.len() - 1));
        let maps = cam_saliency(&pseudo, &Batch::from_samples(&client.samples), &layer)?;

        let mut noised = Vec::with_capacity(client.len());
        for ((s, rec), sal) in client.samples.iter().zip(&recons).zip(&maps) {
            let l_cam = noise::foreground_map(sal, self.config.top_fraction, self.config.temperature);
            let prev = self.noise.samples.get(&s.id).map(|p| &p.n3);
            let sn = noise_for_sample(&self.config, &s.image, rec, l_cam, prev, r, total);
            let add = broadcast_map(&sn.n, s.channels());
            noised.push((&s.image + &add).mapv(|v| v.clamp(0.0, 1.0)));
            self.noise.samples.insert(s.id, sn);
        }
        self.noise.round = r;
        let mut it = noised.into_iter();
        let protected = client.map_images(|_| it.next().unwrap());
        let (_, update) = local_train(global, &protected, &ctx.train, ctx.seed, r)?;
        Ok((update, protected))
    }
}

impl ClientTrainer for ShadowTrainer {
    fn train_round(&mut self, ctx: &RoundContext, client: &ClientDataset, global: &TaskModel) -> Result<ClientUpdate> {
        Ok(self.defend_round(ctx, client, global)?.0)
    }
}
