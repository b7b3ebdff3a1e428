//! Reconstruction-quality and leakage metrics.

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{image_tensor, Sample};
use crate::error::{Error, Result};
use crate::fl::{local_train, LocalTrainConfig};
use crate::models::saliency::SaliencyMap;
use crate::models::task::{TaskArch, TaskModel};
use crate::shadow::noise::top_mask;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: Option<f64>,
}

/// Distance between two `[C, H, W]` images standing in for a learned
/// perceptual metric.
pub trait PerceptualDistance: Sync {
    fn distance(&self, a: &Array3<f64>, b: &Array3<f64>) -> f64;
}

/// Mean squared distance between channel-normalized block activations of a
/// frozen classifier, averaged over blocks.
#[derive(Debug, Clone)]
pub struct ActivationDistance {
    pub model: TaskModel,
}

fn unit_channels(act: &ndarray::ArrayD<f64>) -> ndarray::ArrayD<f64> {
    // act: [1, C, h, w]; normalize the channel vector at every location
    let norm = act.mapv(|v| v * v).sum_axis(Axis(1)).mapv(|v| v.sqrt() + 1e-10).insert_axis(Axis(1));
    act / &norm
}

impl PerceptualDistance for ActivationDistance {
    fn distance(&self, a: &Array3<f64>, b: &Array3<f64>) -> f64 {
        let fa = self.model.activations(&image_tensor(a));
        let fb = self.model.activations(&image_tensor(b));
        let per_layer: Vec<f64> = fa
            .iter()
            .zip(&fb)
            .map(|(x, y)| (unit_channels(x) - unit_channels(y)).mapv(|v| v * v).mean().unwrap_or(0.0))
            .collect();
        per_layer.iter().sum::<f64>() / per_layer.len().max(1) as f64
    }
}

/// Trains the frozen reference classifier used by the perceptual distance
/// and by identifiability matching. Deterministic in `seed`.
pub fn train_reference(public: &[Sample], arch: TaskArch, epochs: usize, seed: u64) -> Result<TaskModel> {
    let mut model = TaskModel::new(arch, seed)?;
    let client = crate::data::ClientDataset {
        client_id: 0,
        samples: public.to_vec(),
        batch_size: 8.min(public.len()).max(1),
    };
    let cfg = LocalTrainConfig { lr: 0.05, local_rounds: 1 };
    for epoch in 0..epochs {
        model = local_train(&model, &client, &cfg, seed, epoch + 1)?.0;
    }
    Ok(model)
}

pub fn mse(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    (a - b).mapv(|v| v * v).mean().unwrap_or(0.0)
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < peak * peak * 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
    }
}

/// Mean SSIM over all 8x8 windows (stride 1) and channels; the window
/// shrinks to the image size for smaller images.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>, peak: f64) -> f64 {
    let (c, h, w) = a.dim();
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for i in 0..=h - wh {
            for j in 0..=w - ww {
                let pa = a.slice(s![ch, i..i + wh, j..j + ww]);
                let pb = b.slice(s![ch, i..i + wh, j..j + ww]);
                let n = (wh * ww) as f64;
                let ma = pa.sum() / n;
                let mb = pb.sum() / n;
                let mut va = 0.0;
                let mut vb = 0.0;
                let mut cov = 0.0;
                for (x, y) in pa.iter().zip(pb.iter()) {
                    va += (x - ma) * (x - ma);
                    vb += (y - mb) * (y - mb);
                    cov += (x - ma) * (y - mb);
                }
                let denom = if n > 1.0 { n - 1.0 } else { 1.0 };
                let (va, vb, cov) = (va / denom, vb / denom, cov / denom);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn image_metrics(
    a: &Array3<f64>,
    b: &Array3<f64>,
    peak: f64,
    perceptual: Option<&dyn PerceptualDistance>,
) -> Result<ImageMetrics> {
    if a.shape() != b.shape() {
        return Err(Error::Data(format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let m = mse(a, b);
    Ok(ImageMetrics {
        mse: m,
        psnr: psnr_from_mse(m, peak),
        ssim: ssim(a, b, peak),
        perceptual: perceptual.map(|p| p.distance(a, b)),
    })
}

/// For each reconstruction, the original with the highest SSIM (lowest index on ties).
pub fn best_match(recons: &[Array3<f64>], originals: &[Array3<f64>], peak: f64) -> Vec<usize> {
    recons
        .iter()
        .map(|r| {
            let mut best = (0, f64::NEG_INFINITY);
            for (j, o) in originals.iter().enumerate() {
                let v = ssim(r, o, peak);
                if v > best.1 {
                    best = (j, v);
                }
            }
            best.0
        })
        .collect()
}

/// Inclusive-exclusive box `(row0, row1, col0, col1)`.
pub type BoundingBox = (usize, usize, usize, usize);

/// Bounding box of the top-fraction saliency pixels, grown to at least 8x8
/// (or the whole image if smaller) around its centre.
pub fn target_box(saliency: &Array2<f64>, top_fraction: f64) -> BoundingBox {
    let (h, w) = saliency.dim();
    let mask = top_mask(saliency, top_fraction);
    let (mut r0, mut r1, mut c0, mut c1) = (h, 0, w, 0);
    for ((i, j), v) in mask.indexed_iter() {
        if *v > 0.0 {
            r0 = r0.min(i);
            r1 = r1.max(i + 1);
            c0 = c0.min(j);
            c1 = c1.max(j + 1);
        }
    }
    let grow = |lo: usize, hi: usize, len: usize| -> (usize, usize) {
        let want = SSIM_WINDOW.min(len);
        if hi - lo >= want {
            return (lo, hi);
        }
        let centre = (lo + hi) / 2;
        let start = centre.saturating_sub(want / 2).min(len - want);
        (start, start + want)
    };
    let (r0, r1) = grow(r0, r1, h);
    let (c0, c1) = grow(c0, c1, w);
    (r0, r1, c0, c1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub bbox: BoundingBox,
    pub metrics: ImageMetrics,
}

pub fn target_region_metrics(
    recon: &Array3<f64>,
    original: &Array3<f64>,
    saliency: &SaliencyMap,
    top_fraction: f64,
    peak: f64,
    perceptual: Option<&dyn PerceptualDistance>,
) -> Result<RegionMetrics> {
    let bbox = target_box(&saliency.values, top_fraction);
    let (r0, r1, c0, c1) = bbox;
    let crop = |x: &Array3<f64>| x.slice(s![.., r0..r1, c0..c1]).to_owned();
    let full = (r0, r1, c0, c1) == (0, original.shape()[1], 0, original.shape()[2]);
    // the perceptual network needs full-size inputs; score the masked crops
    let metrics = if full {
        image_metrics(recon, original, peak, perceptual)?
    } else {
        let mut m = image_metrics(&crop(recon), &crop(original), peak, None)?;
        if let Some(p) = perceptual {
            let keep = |x: &Array3<f64>| {
                let mut out = Array3::zeros(x.raw_dim());
                out.slice_mut(s![.., r0..r1, c0..c1]).assign(&x.slice(s![.., r0..r1, c0..c1]));
                out
            };
            m.perceptual = Some(p.distance(&keep(recon), &keep(original)));
        }
        m
    };
    Ok(RegionMetrics { bbox, metrics })
}

/// `(SSIM(x, x_s) - SSIM(x_s, P)) / SSIM(x_s, P)`; `None` when the
/// denominator vanishes.
pub fn rdlv_from_ssim(ssim_x_xs: f64, ssim_xs_p: f64) -> Option<f64> {
    if ssim_xs_p == 0.0 || !ssim_xs_p.is_finite() {
        None
    } else {
        Some((ssim_x_xs - ssim_xs_p) / ssim_xs_p)
    }
}

pub fn rdlv(x: &Array3<f64>, x_s: &Array3<f64>, prior: &Array3<f64>, peak: f64) -> Option<f64> {
    rdlv_from_ssim(ssim(x, x_s, peak), ssim(x_s, prior, peak))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Fraction of reconstructions whose source is among the `k` training
/// embeddings most cosine-similar to them (ties to the lower index).
pub fn iip(recons: &[Vec<f64>], train: &[Vec<f64>], source_ids: &[usize], k: usize) -> Result<f64> {
    if k == 0 || k > train.len() {
        return Err(Error::Config(format!("k = {k} is outside 1..={}", train.len())));
    }
    if recons.len() != source_ids.len() {
        return Err(Error::Data("one source index per reconstruction is required".into()));
    }
    if recons.is_empty() {
        return Ok(0.0);
    }
    let hits = recons
        .iter()
        .zip(source_ids)
        .filter(|(r, &src)| {
            let sims: Vec<f64> = train.iter().map(|t| cosine(r, t)).collect();
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
            order[..k].contains(&src)
        })
        .count();
    Ok(hits as f64 / recons.len() as f64)
}

/// Penultimate-layer embeddings of `[C, H, W]` images under `model`.
pub fn embed(model: &TaskModel, images: &[Array3<f64>]) -> Vec<Vec<f64>> {
    if images.is_empty() {
        return Vec::new();
    }
    let e = model.embeddings(&crate::data::stack_images(images.iter()));
    e.axis_iter(Axis(0)).map(|r| r.iter().copied().collect()).collect()
}

/// Mean and population standard deviation, ignoring non-finite entries.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;
    use ndarray::arr3;
    use rand::Rng;

    fn img(seed: u64) -> Array3<f64> {
        generate_synthetic_dataset(2, 16, 1, 2, seed).unwrap()[0].image.clone()
    }

    #[test]
    fn identical_images() {
        let a = img(1);
        let reference = ActivationDistance {
            model: TaskModel::new(TaskArch::new(1, 16, 2), 0).unwrap(),
        };
        let m = image_metrics(&a, &a, 1.0, Some(&reference)).unwrap();
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.psnr, 100.0);
        assert!((m.ssim - 1.0).abs() < 1e-12);
        assert_eq!(m.perceptual, Some(0.0));
    }

    #[test]
    fn constant_offset_gives_20_db() {
        let a = img(1).mapv(|v| v * 0.8);
        let b = a.mapv(|v| v + 0.1);
        let m = image_metrics(&a, &b, 1.0, None).unwrap();
        assert!((m.mse - 0.01).abs() < 1e-12);
        assert!((m.psnr - 20.0).abs() < 1e-9);
        assert!(image_metrics(&a, &Array3::zeros((1, 8, 8)), 1.0, None).is_err());
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let (a, b) = (img(1), img(2));
        assert!((ssim(&a, &b, 1.0) - ssim(&b, &a, 1.0)).abs() < 1e-15);
        assert!(ssim(&a, &b, 1.0) <= 1.0 && ssim(&a, &a.mapv(|v| 1.0 - v), 1.0) >= -1.0);
    }

    #[test]
    fn psnr_decreases_with_mse() {
        let mut last = f64::INFINITY;
        for k in 1..50 {
            let p = psnr_from_mse(k as f64 * 1e-3, 1.0);
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn best_match_examples() {
        let (a, b) = (img(1), img(2));
        assert_eq!(best_match(&[b.clone(), a.clone()], &[a.clone(), b.clone()], 1.0), vec![1, 0]);
        assert_eq!(best_match(&[a.clone(), b.clone()], std::slice::from_ref(&a), 1.0), vec![0, 0]);
    }

    /// 2x2 fixture: `near` has the lower MSE but the wrong structure,
    /// `far` has the right structure with an offset.
    #[test]
    fn ssim_ordering_beats_mse_ordering() {
        let r = arr3(&[[[0.2, 0.8], [0.8, 0.2]]]);
        let near = arr3(&[[[0.5, 0.5], [0.5, 0.5]]]);
        let far = arr3(&[[[0.6, 1.0], [1.0, 0.6]]]);
        assert!(mse(&r, &near) < mse(&r, &far));
        assert!(ssim(&r, &far, 1.0) > ssim(&r, &near, 1.0));
        assert_eq!(best_match(&[r], &[near, far], 1.0), vec![1]);
    }

    #[test]
    fn target_box_examples() {
        let mut s = Array2::zeros((16, 16));
        for i in 9..14 {
            for j in 10..15 {
                s[[i, j]] = 1.0 + (i * j) as f64 * 0.01;
            }
        }
        let (r0, r1, c0, c1) = target_box(&s, 0.05);
        assert!(r0 >= 8 && c0 >= 8 && r1 <= 16 && c1 <= 16);
        let a = img(1);
        let b = img(2);
        let whole = image_metrics(&a, &b, 1.0, None).unwrap();
        let flat = SaliencyMap::new(Array2::from_elem((16, 16), 1.0), "block1.conv");
        let region = target_region_metrics(&a, &b, &flat, 1.0, 1.0, None).unwrap();
        assert_eq!(region.metrics, whole);
        for frac in [0.01, 0.1, 0.3, 0.7] {
            let (r0, r1, c0, c1) = target_box(&s, frac);
            assert!((r1 - r0) * (c1 - c0) >= (frac * 256.0).ceil() as usize);
        }
        let mut one = Array2::zeros((16, 16));
        one[[0, 0]] = 1.0;
        assert_eq!(target_box(&one, 1.0 / 256.0), (0, 8, 0, 8));
    }

    #[test]
    fn rdlv_examples() {
        assert_eq!(rdlv_from_ssim(0.5, 0.5), Some(0.0));
        assert!((rdlv_from_ssim(0.6, 0.5).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(rdlv_from_ssim(0.3, 0.0), None);
        assert!(rdlv_from_ssim(0.3, 0.5).unwrap() < 0.0);
        let (x, p) = (img(1), img(2));
        assert!(rdlv(&x, &x, &p, 1.0).unwrap() > 0.0);
        assert!(rdlv(&x, &p, &p, 1.0).unwrap() < 0.0);
    }

    #[test]
    fn iip_properties() {
        let train: Vec<Vec<f64>> = (0..5).map(|i| (0..4).map(|j| ((i * 7 + j * 3) % 5) as f64 + 0.1).collect()).collect();
        assert_eq!(iip(&[train[2].clone()], &train, &[2], 1).unwrap(), 1.0);
        assert!(iip(&[train[2].clone()], &train, &[2], 6).is_err());
        let mut rng = crate::rng::stream(1, &[]);
        let recons: Vec<Vec<f64>> = (0..30).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let src: Vec<usize> = (0..30).map(|i| i % 5).collect();
        let i1 = iip(&recons, &train, &src, 1).unwrap();
        let i3 = iip(&recons, &train, &src, 3).unwrap();
        let i5 = iip(&recons, &train, &src, 5).unwrap();
        assert!(i1 <= i3 && i3 <= i5 && i5 == 1.0);
    }

    #[test]
    fn iip_null_model_matches_chance() {
        let mut rng = crate::rng::stream(42, &[]);
        let n = 10;
        let trials = 1000;
        let mut hits = 0.0;
        for _ in 0..trials {
            let train: Vec<Vec<f64>> = (0..n).map(|_| (0..6).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
            let recon: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
            let src = rng.random_range(0..n);
            hits += iip(&[recon], &train, &[src], 1).unwrap();
        }
        let p = 1.0 / n as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((hits / trials as f64 - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn reference_training_is_deterministic() {
        let public = generate_synthetic_dataset(16, 16, 1, 2, 3).unwrap();
        let a = train_reference(&public, TaskArch::new(1, 16, 2), 2, 1).unwrap();
        let b = train_reference(&public, TaskArch::new(1, 16, 2), 2, 1).unwrap();
        assert_eq!(a, b);
    }
}
