//! Baseline defenses applied to an upload or to the training images.

use ndarray::Array3;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, Sample};
use crate::error::{Error, Result};
use crate::fl::{local_train, ClientTrainer, ClientUpdate, RoundContext};
use crate::models::task::TaskModel;
use crate::rng::{self, tag};
use crate::shadow::ShadowConfig;

pub const DEFAULT_IMAGE_DP_WEAK: f64 = 0.25;
pub const DEFAULT_STRONG_FACTOR: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DefenseConfig {
    None,
    DpGradient {
        #[serde(default = "default_clip_norm")]
        clip_norm: f64,
        #[serde(default = "default_dp_sigma")]
        sigma: f64,
    },
    DpImageWeak {
        #[serde(default = "default_weak_sigma")]
        sigma: f64,
    },
    DpImageStrong {
        #[serde(default = "default_strong_sigma")]
        sigma: f64,
    },
    Sparsify {
        #[serde(default = "default_keep_ratio")]
        keep_ratio: f64,
    },
    /// Elementwise clamp. Without an explicit threshold each client uses the
    /// given percentile of its own round-1 |g|, computed once.
    Clip {
        #[serde(default)]
        threshold: Option<f64>,
        #[serde(default = "default_percentile")]
        percentile: f64,
    },
    Shadow(ShadowConfig),
    Soteria,
    Outpost,
    Censor,
}

fn default_clip_norm() -> f64 {
    1.0
}
fn default_dp_sigma() -> f64 {
    0.1
}
fn default_weak_sigma() -> f64 {
    DEFAULT_IMAGE_DP_WEAK
}
fn default_strong_sigma() -> f64 {
    DEFAULT_IMAGE_DP_WEAK * DEFAULT_STRONG_FACTOR
}
fn default_keep_ratio() -> f64 {
    0.4
}
fn default_percentile() -> f64 {
    0.9
}

impl DefenseConfig {
    pub fn name(&self) -> &'static str {
        match self {
            DefenseConfig::None => "none",
            DefenseConfig::DpGradient { .. } => "dp_gradient",
            DefenseConfig::DpImageWeak { .. } => "dp_image_weak",
            DefenseConfig::DpImageStrong { .. } => "dp_image_strong",
            DefenseConfig::Sparsify { .. } => "sparsify",
            DefenseConfig::Clip { .. } => "clip",
            DefenseConfig::Shadow(_) => "shadow",
            DefenseConfig::Soteria => "soteria",
            DefenseConfig::Outpost => "outpost",
            DefenseConfig::Censor => "censor",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            DefenseConfig::None => Ok(()),
            DefenseConfig::DpGradient { clip_norm, sigma } => {
                if !(clip_norm > 0.0) || !(sigma >= 0.0) {
                    return bad(format!("dp_gradient needs clip_norm > 0 and sigma >= 0, got {clip_norm}, {sigma}"));
                }
                Ok(())
            }
            DefenseConfig::DpImageWeak { sigma } | DefenseConfig::DpImageStrong { sigma } => {
                if !(sigma >= 0.0) {
                    return bad(format!("image noise sigma must be >= 0, got {sigma}"));
                }
                Ok(())
            }
            DefenseConfig::Sparsify { keep_ratio } => {
                if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
                    return bad(format!("keep_ratio must be in (0, 1], got {keep_ratio}"));
                }
                Ok(())
            }
            DefenseConfig::Clip { threshold, percentile } => {
                if let Some(t) = threshold {
                    if !(t > 0.0) {
                        return bad(format!("clip threshold must be positive, got {t}"));
                    }
                }
                if !(percentile > 0.0 && percentile <= 1.0) {
                    return bad(format!("clip percentile must be in (0, 1], got {percentile}"));
                }
                Ok(())
            }
            DefenseConfig::Shadow(ref s) => s.validate(),
            DefenseConfig::Soteria | DefenseConfig::Outpost | DefenseConfig::Censor => Err(
                Error::NotImplemented(format!("defense '{}' is reserved but not implemented", self.name())),
            ),
        }
    }
}

/// Per-layer L2 clipping followed by Gaussian noise of std `sigma * clip_norm`.
pub fn dp_gradient(update: &ClientUpdate, clip_norm: f64, sigma: f64, seed: u64) -> ClientUpdate {
    let mut out = update.clone();
    let mut rng = rng::stream(seed, &[tag::DP_NOISE, update.client_id as u64, update.round as u64]);
    let normal = Normal::new(0.0, sigma * clip_norm).unwrap();
    for (_, g) in out.gradients.iter_mut() {
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > clip_norm {
            let s = clip_norm / norm;
            g.mapv_inplace(|v| v * s);
        }
        if sigma > 0.0 {
            g.mapv_inplace(|v| v + normal.sample(&mut rng));
        }
    }
    out
}

/// Keeps the `ceil(keep_ratio * d)` largest-magnitude coordinates over all
/// parameters; ties go to the earlier coordinate in name-then-index order.
pub fn gradient_sparsify(update: &ClientUpdate, keep_ratio: f64) -> ClientUpdate {
    let flat = update.gradients.flatten();
    let keep = ((keep_ratio * flat.len() as f64).ceil() as usize).min(flat.len());
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()).then(a.cmp(&b)));
    let mut mask = vec![false; flat.len()];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    let mut out = update.clone();
    let mut pos = 0;
    for (_, g) in out.gradients.iter_mut() {
        for v in g.iter_mut() {
            if !mask[pos] {
                *v = 0.0;
            }
            pos += 1;
        }
    }
    out
}

pub fn gradient_clip(update: &ClientUpdate, threshold: f64) -> ClientUpdate {
    let mut out = update.clone();
    for (_, g) in out.gradients.iter_mut() {
        g.mapv_inplace(|v| v.clamp(-threshold, threshold));
    }
    out
}

/// Value at quantile `q` of |g| (nearest rank).
pub fn abs_percentile(update: &ClientUpdate, q: f64) -> f64 {
    let mut mags: Vec<f64> = update.gradients.flatten().iter().map(|v| v.abs()).collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f64::total_cmp);
    let rank = ((q * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
    mags[rank - 1]
}

/// Adds i.i.d. Gaussian pixel noise of std `sigma`.
pub fn dp_image(images: &[Array3<f64>], sigma: f64, seed: u64) -> Vec<Array3<f64>> {
    if sigma == 0.0 {
        return images.to_vec();
    }
    let mut rng = rng::stream(seed, &[tag::DP_NOISE]);
    let normal = Normal::new(0.0, sigma).unwrap();
    images
        .iter()
        .map(|im| im.mapv(|v| v + normal.sample(&mut rng)))
        .collect()
}

/// Trainer for every kind except the shadow defense.
pub struct BaselineTrainer {
    pub config: DefenseConfig,
    pub seed: u64,
    clip_threshold: Option<f64>,
}

impl BaselineTrainer {
    pub fn new(config: DefenseConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if matches!(config, DefenseConfig::Shadow(_)) {
            return Err(Error::Config("the shadow defense has its own trainer".into()));
        }
        let clip_threshold = match config {
            DefenseConfig::Clip { threshold, .. } => threshold,
            _ => None,
        };
        Ok(Self {
            config,
            seed,
            clip_threshold,
        })
    }

    pub fn clip_threshold(&self) -> Option<f64> {
        self.clip_threshold
    }
}

impl ClientTrainer for BaselineTrainer {
    fn train_round(&mut self, ctx: &RoundContext, client: &ClientDataset, global: &TaskModel) -> Result<ClientUpdate> {
        let noise_seed = rng::derive_seed(self.seed, &[client.client_id as u64, ctx.round as u64]);
        match self.config {
            DefenseConfig::DpImageWeak { sigma } | DefenseConfig::DpImageStrong { sigma } => {
                let images: Vec<Array3<f64>> = client.samples.iter().map(|s| s.image.clone()).collect();
                let noisy = dp_image(&images, sigma, noise_seed);
                let mut it = noisy.into_iter();
                let noised = client.map_images(|_: &Sample| it.next().unwrap().mapv(|v| v.clamp(0.0, 1.0)));
                return Ok(local_train(global, &noised, &ctx.train, ctx.seed, ctx.round)?.1);
            }
            _ => {}
        }
        let update = local_train(global, client, &ctx.train, ctx.seed, ctx.round)?.1;
        Ok(match self.config {
            DefenseConfig::DpGradient { clip_norm, sigma } => dp_gradient(&update, clip_norm, sigma, noise_seed),
            DefenseConfig::Sparsify { keep_ratio } => gradient_sparsify(&update, keep_ratio),
            DefenseConfig::Clip { percentile, .. } => {
                let t = *self
                    .clip_threshold
                    .get_or_insert_with(|| abs_percentile(&update, percentile));
                if t > 0.0 {
                    gradient_clip(&update, t)
                } else {
                    update
                }
            }
            _ => update,
        })
    }
}
