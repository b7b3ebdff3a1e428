//! Latent-to-image generator used as the defender's shadow model and as the
//! attacker's image prior. A mapper MLP turns latents into style vectors; a
//! convolutional decoder turns style vectors into images.

use ndarray::{ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use shadowdef_autograd::optim::Adam;
use shadowdef_autograd::{grad, no_grad, Tensor, Var};

use crate::data::{stack_images, Sample};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensors::{var_refs, Tensors, VarMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub latent_dim: usize,
    pub style_dim: usize,
    /// Channels of the 4x4 seed feature map.
    pub base_channels: usize,
    pub hidden_channels: usize,
    pub out_channels: usize,
    pub resolution: usize,
}

impl GeneratorArch {
    pub fn new(out_channels: usize, resolution: usize) -> Self {
        Self {
            latent_dim: 32,
            style_dim: 32,
            base_channels: 16,
            hidden_channels: 8,
            out_channels,
            resolution,
        }
    }

    /// Number of 2x upsampling stages from the 4x4 seed.
    pub fn stages(&self) -> usize {
        (self.resolution / 4).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < 8 || !r.is_multiple_of(4) || !(r / 4).is_power_of_two() {
            return Err(Error::Config(format!(
                "generator resolution {r} must be 4 * 2^k with k >= 1"
            )));
        }
        if self.out_channels == 0 || self.latent_dim == 0 || self.style_dim == 0 {
            return Err(Error::Config("generator dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowGenerator {
    pub arch: GeneratorArch,
    /// Latent-to-style mapper, names prefixed `map.`.
    pub mapper: Tensors,
    /// Style-to-image decoder, names prefixed `gen.`.
    pub generator: Tensors,
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl rand::Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(rng))
}

impl ShadowGenerator {
    pub fn new(arch: GeneratorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, &[tag::GENERATOR_INIT]);
        let (l, s) = (arch.latent_dim, arch.style_dim);
        let mut mapper = Tensors::new();
        mapper.insert("map.fc1.weight", he_normal(&[s, l], l, &mut rng));
        mapper.insert("map.fc1.bias", ArrayD::zeros(IxDyn(&[s])));
        mapper.insert("map.fc2.weight", he_normal(&[s, s], s, &mut rng).mapv(|v| v * 0.5));
        mapper.insert("map.fc2.bias", ArrayD::zeros(IxDyn(&[s])));

        let mut generator = Tensors::new();
        let seed_len = arch.base_channels * 16;
        generator.insert("gen.fc.weight", he_normal(&[seed_len, s], s, &mut rng));
        generator.insert("gen.fc.bias", ArrayD::zeros(IxDyn(&[seed_len])));
        let mut prev = arch.base_channels;
        for stage in 0..arch.stages() {
            let out = if stage + 1 == arch.stages() {
                arch.out_channels
            } else {
                arch.hidden_channels
            };
            generator.insert(
                format!("gen.conv{stage}.weight"),
                he_normal(&[out, prev, 3, 3], prev * 9, &mut rng),
            );
            generator.insert(format!("gen.conv{stage}.bias"), ArrayD::zeros(IxDyn(&[out])));
            prev = out;
        }
        Ok(Self {
            arch,
            mapper,
            generator,
        })
    }

    /// Images `[N, C, H, W]` in `(0, 1)` from latents `[N, latent_dim]`.
    pub fn generate_vars(&self, mapper: &VarMap, generator: &VarMap, z: &Var) -> Var {
        let a = &self.arch;
        let n = z.shape()[0];
        let h = (z.matmul(&mapper["map.fc1.weight"].t()) + &mapper["map.fc1.bias"]).relu();
        let style = h.matmul(&mapper["map.fc2.weight"].t()) + &mapper["map.fc2.bias"];
        let seed = (style.matmul(&generator["gen.fc.weight"].t()) + &generator["gen.fc.bias"]).relu();
        let mut x = seed.reshape(&[n, a.base_channels, 4, 4]);
        let stages = a.stages();
        for stage in 0..stages {
            let w = &generator[&format!("gen.conv{stage}.weight")];
            let b = &generator[&format!("gen.conv{stage}.bias")];
            let c = b.len();
            x = x.upsample2().conv2d(w, 1) + b.reshape(&[1, c, 1, 1]);
            if stage + 1 < stages {
                x = x.relu();
            }
        }
        x.sigmoid()
    }

    pub fn generate(&self, z: &Tensor) -> Tensor {
        let _g = no_grad();
        let m = self.mapper.to_vars(false);
        let g = self.generator.to_vars(false);
        self.generate_vars(&m, &g, &Var::constant(z.clone()))
            .value()
            .clone()
    }

    /// Latents `[n, latent_dim]` drawn from a standard normal.
    pub fn sample_latents(&self, n: usize, seed: u64) -> Tensor {
        let mut rng = rng::stream(seed, &[tag::LATENT_INIT]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        ArrayD::from_shape_fn(IxDyn(&[n, self.arch.latent_dim]), |_| normal.sample(&mut rng))
    }

    /// Mapper and decoder parameters together.
    pub fn all_params(&self) -> Tensors {
        let mut all = self.mapper.clone();
        all.extend(self.generator.clone());
        all
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

/// Reconstruction pretraining on a public set: per-sample latents and all
/// generator weights are fitted jointly with Adam on mean squared error.
pub fn pretrain_shadow(
    generator: &ShadowGenerator,
    public: &[Sample],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<(ShadowGenerator, PretrainReport)> {
    if steps == 0 {
        return Ok((generator.clone(), PretrainReport { losses: Vec::new() }));
    }
    let first = public
        .first()
        .ok_or_else(|| Error::Data("pretraining needs public samples".into()))?;
    let a = &generator.arch;
    if first.image.shape() != [a.out_channels, a.resolution, a.resolution] {
        return Err(Error::Config(format!(
            "generator emits {:?} but public images are {:?}",
            [a.out_channels, a.resolution, a.resolution],
            first.image.shape()
        )));
    }
    let target = Var::constant(stack_images(public.iter().map(|s| &s.image)));
    let mut gen = generator.clone();
    let mut latents = gen.sample_latents(public.len(), rng::derive_seed(seed, &[tag::PRETRAIN]));
    let mut opt = Adam::new(lr);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let m = gen.mapper.to_vars(true);
        let g = gen.generator.to_vars(true);
        let z = Var::param(latents.clone());
        let out = gen.generate_vars(&m, &g, &z);
        let loss = (&out - &target).square().mean();
        let value = loss.item();
        if !value.is_finite() || value > 1e3 {
            return Err(Error::Training(format!("shadow pretraining diverged (loss {value})")));
        }
        losses.push(value);
        let mut handles = var_refs(&m);
        handles.extend(var_refs(&g));
        handles.push(&z);
        let grads = grad(&loss, &handles, false);
        let mut params: Vec<Tensor> = gen
            .mapper
            .values()
            .chain(gen.generator.values())
            .cloned()
            .collect();
        params.push(latents.clone());
        let grads: Vec<Tensor> = grads.into_iter().map(|v| v.value().clone()).collect();
        opt.step(&mut params, &grads);
        latents = params.pop().unwrap();
        let n_map = gen.mapper.len();
        for (t, p) in gen.mapper.iter_mut().map(|(_, t)| t).zip(params.drain(..n_map)) {
            *t = p;
        }
        for (t, p) in gen.generator.iter_mut().map(|(_, t)| t).zip(params.drain(..)) {
            *t = p;
        }
    }
    Ok((gen, PretrainReport { losses }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;

    #[test]
    fn output_shape_and_determinism() {
        let g = ShadowGenerator::new(GeneratorArch::new(1, 16), 3).unwrap();
        let z = g.sample_latents(2, 1);
        let x = g.generate(&z);
        assert_eq!(x.shape(), &[2, 1, 16, 16]);
        assert_eq!(x, g.generate(&z));
        assert!(x.iter().all(|v| *v > 0.0 && *v < 1.0));
        let g3 = ShadowGenerator::new(GeneratorArch::new(3, 8), 3).unwrap();
        assert_eq!(g3.generate(&g3.sample_latents(1, 0)).shape(), &[1, 3, 8, 8]);
    }

    #[test]
    fn mapper_and_decoder_names_are_disjoint() {
        let g = ShadowGenerator::new(GeneratorArch::new(1, 16), 3).unwrap();
        assert!(g.mapper.names().all(|n| n.starts_with("map.")));
        assert!(g.generator.names().all(|n| n.starts_with("gen.")));
    }

    #[test]
    fn bad_resolution_is_rejected() {
        assert!(ShadowGenerator::new(GeneratorArch::new(1, 12), 0).is_err());
        assert!(ShadowGenerator::new(GeneratorArch::new(1, 4), 0).is_err());
    }

    /// Directional derivative check in both z and the decoder weights.
    #[test]
    fn jvp_matches_finite_differences() {
        let g = ShadowGenerator::new(GeneratorArch::new(1, 8), 5).unwrap();
        let z0 = g.sample_latents(1, 2);
        let dz = g.sample_latents(1, 3);
        let probe = g.sample_latents(1, 4).into_shape_with_order(IxDyn(&[1, 32])).unwrap();
        // scalar functional: <probe-weighted output> via a fixed random image
        let weight = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |i| ((i[2] * 8 + i[3]) as f64 * 0.37).sin());
        let functional = |gen: &ShadowGenerator, z: &Tensor| -> f64 {
            (&gen.generate(z) * &weight).sum()
        };
        let m = g.mapper.to_vars(true);
        let gv = g.generator.to_vars(true);
        let z = Var::param(z0.clone());
        let out = g.generate_vars(&m, &gv, &z).dot(&Var::constant(weight.clone()));
        let mut handles = vec![&z];
        handles.extend(var_refs(&gv));
        let grads = grad(&out, &handles, false);

        let eps = 1e-5;
        // latent direction
        let analytic: f64 = (grads[0].value() * &dz).sum();
        let fd = (functional(&g, &(&z0 + &(&dz * eps))) - functional(&g, &(&z0 - &(&dz * eps)))) / (2.0 * eps);
        assert!((analytic - fd).abs() / fd.abs().max(1e-6) < 1e-3, "{analytic} vs {fd}");

        // decoder weight direction
        let dir = g.generator.map(|t| t.mapv(|v| (v * 13.1).sin()));
        let analytic: f64 = grads[1..]
            .iter()
            .zip(dir.values())
            .map(|(gr, d)| (gr.value() * d).sum())
            .sum();
        let mut plus = g.clone();
        plus.generator.axpy(eps, &dir);
        let mut minus = g.clone();
        minus.generator.axpy(-eps, &dir);
        let fd = (functional(&plus, &z0) - functional(&minus, &z0)) / (2.0 * eps);
        assert!((analytic - fd).abs() / fd.abs().max(1e-6) < 1e-3, "{analytic} vs {fd}");
        let _ = probe;
    }

    #[test]
    fn pretraining_reduces_loss_and_is_deterministic() {
        let g = ShadowGenerator::new(GeneratorArch::new(1, 16), 1).unwrap();
        let public = generate_synthetic_dataset(8, 16, 1, 2, 4).unwrap();
        let (same, report) = pretrain_shadow(&g, &public, 0, 1e-2, 0).unwrap();
        assert_eq!(same, g);
        assert!(report.losses.is_empty());

        let (trained, report) = pretrain_shadow(&g, &public, 200, 1e-2, 9).unwrap();
        let l = &report.losses;
        assert!(l[199] < l[0]);
        assert!(l[199] <= l[189], "trailing window increased: {} -> {}", l[189], l[199]);
        let (again, _) = pretrain_shadow(&g, &public, 200, 1e-2, 9).unwrap();
        assert_eq!(trained, again);
    }
}
