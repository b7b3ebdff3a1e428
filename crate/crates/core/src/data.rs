//! Desk-scale image datasets, client partitioning and normalization.
//!
//! Images are stored channel-first (`[C, H, W]`) with values in `[0, 1]`.

use std::path::Path;

use ndarray::{Array3, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use shadowdef_autograd::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image: Array3<f64>,
    pub label: usize,
    pub id: u64,
}

impl Sample {
    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub samples: Vec<Sample>,
    pub batch_size: usize,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// SGD steps per local epoch.
    pub fn steps_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size)
    }

    /// Same client with every image replaced through `f`.
    pub fn map_images(&self, mut f: impl FnMut(&Sample) -> Array3<f64>) -> ClientDataset {
        ClientDataset {
            client_id: self.client_id,
            batch_size: self.batch_size,
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    image: f(s),
                    label: s.label,
                    id: s.id,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSpec {
    pub client_sizes: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    /// 0 gives label-balanced clients, 1 single-label clients.
    pub label_skew: f64,
}

impl Default for PartitionSpec {
    /// Nine clients; the last holds a single image.
    fn default() -> Self {
        Self {
            client_sizes: vec![8, 8, 8, 8, 16, 16, 16, 16, 1],
            batch_sizes: vec![4, 4, 4, 4, 8, 8, 8, 8, 1],
            label_skew: 0.0,
        }
    }
}

impl PartitionSpec {
    pub fn total(&self) -> usize {
        self.client_sizes.iter().sum()
    }

    pub fn validate(&self, available: usize) -> Result<()> {
        if self.client_sizes.is_empty() {
            return Err(Error::Config("partition has no clients".into()));
        }
        if self.client_sizes.len() != self.batch_sizes.len() {
            return Err(Error::Config(format!(
                "{} client sizes but {} batch sizes",
                self.client_sizes.len(),
                self.batch_sizes.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.label_skew) {
            return Err(Error::Config(format!(
                "label_skew {} outside [0, 1]",
                self.label_skew
            )));
        }
        for (i, (&n, &b)) in self.client_sizes.iter().zip(&self.batch_sizes).enumerate() {
            if n == 0 || b == 0 {
                return Err(Error::Config(format!("client {} has zero size or batch", i + 1)));
            }
            if b > n {
                return Err(Error::Config(format!(
                    "client {} batch size {b} exceeds its {n} samples",
                    i + 1
                )));
            }
        }
        if self.total() > available {
            return Err(Error::Config(format!(
                "partition needs {} samples, only {available} available",
                self.total()
            )));
        }
        Ok(())
    }
}

/// Procedural "organ + lesion" images: a background gradient, one ellipse whose
/// eccentricity encodes the class, a small bright lesion, and fine texture.
pub fn generate_synthetic_dataset(
    n: usize,
    resolution: usize,
    channels: usize,
    classes: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if resolution < 8 {
        return Err(Error::Config(format!("resolution {resolution} below 8")));
    }
    if classes == 0 || n < classes {
        return Err(Error::Config(format!(
            "need at least one sample per class (n={n}, classes={classes})"
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::Config(format!("channels must be 1 or 3, got {channels}")));
    }
    let mut rng = rng::stream(seed, &[tag::DATA]);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);

    let texture = Normal::new(0.0, 0.03).unwrap();
    let res = resolution as f64;
    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(idx, label)| {
            // ellipse axis ratio 1.0 (class 0) down to 0.4 (last class)
            let ratio = if classes > 1 {
                1.0 - 0.6 * label as f64 / (classes - 1) as f64
            } else {
                1.0
            };
            let cx = res / 2.0 + rng.random_range(-res / 10.0..res / 10.0);
            let cy = res / 2.0 + rng.random_range(-res / 10.0..res / 10.0);
            let major = res * rng.random_range(0.28..0.36);
            let minor = major * ratio;
            let angle: f64 = rng.random_range(-0.25..0.25);
            let (sin, cos) = angle.sin_cos();
            let organ_level = rng.random_range(0.45..0.65);
            let grad_dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let grad_amp = rng.random_range(0.05..0.2);
            let base = rng.random_range(0.1..0.25);
            // lesion placed inside the organ
            let lr = rng.random_range(0.0..0.5);
            let la: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let lx = cx + lr * major * la.cos() * cos - lr * minor * la.sin() * sin;
            let ly = cy + lr * major * la.cos() * sin + lr * minor * la.sin() * cos;
            let lesion_radius = res * rng.random_range(0.07..0.11);
            let lesion_level = rng.random_range(0.2..0.35);
            let tint: Vec<f64> = (0..channels)
                .map(|c| if c == 0 { 1.0 } else { rng.random_range(0.7..1.0) })
                .collect();

            let mut image = Array3::zeros((channels, resolution, resolution));
            for i in 0..resolution {
                for j in 0..resolution {
                    let y = i as f64 + 0.5;
                    let x = j as f64 + 0.5;
                    let u = (x - res / 2.0) / res;
                    let v = (y - res / 2.0) / res;
                    let mut value = base + grad_amp * (u * grad_dir.cos() + v * grad_dir.sin() + 0.5);
                    let dx = x - cx;
                    let dy = y - cy;
                    let rx = dx * cos + dy * sin;
                    let ry = -dx * sin + dy * cos;
                    let r = ((rx / major).powi(2) + (ry / minor).powi(2)).sqrt();
                    // soft edge over about one pixel
                    let inside = 1.0 / (1.0 + ((r - 1.0) * major / 0.6).exp());
                    value += organ_level * inside;
                    let ld = ((x - lx).powi(2) + (y - ly).powi(2)).sqrt() / lesion_radius;
                    value += lesion_level * (-ld * ld).exp() * inside;
                    let grain = texture.sample(&mut rng);
                    for (c, t) in tint.iter().enumerate() {
                        image[[c, i, j]] = (value * t + grain).clamp(0.0, 1.0);
                    }
                }
            }
            Sample {
                image,
                label,
                id: idx as u64,
            }
        })
        .collect();
    Ok(samples)
}

/// Loads `path/<class>/<image>` folders. Classes are numbered in
/// lexicographic order of their directory names; files likewise.
pub fn load_image_folder(path: &Path, resolution: usize) -> Result<Vec<Sample>> {
    if resolution < 8 {
        return Err(Error::Config(format!("resolution {resolution} below 8")));
    }
    let mut class_dirs: Vec<_> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    let mut files = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        files.extend(entries.into_iter().map(|p| (label, p)));
    }
    if files.is_empty() {
        return Err(Error::Data(format!("no images under {}", path.display())));
    }
    let decoded = files
        .iter()
        .map(|(label, p)| {
            image::open(p)
                .map(|img| (*label, img))
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let grayscale = decoded.iter().all(|(_, img)| !img.color().has_color());
    let channels = if grayscale { 1 } else { 3 };
    let size = resolution as u32;
    let samples = decoded
        .into_iter()
        .enumerate()
        .map(|(id, (label, img))| {
            let img = img.resize_exact(size, size, image::imageops::FilterType::Triangle);
            let mut arr = Array3::zeros((channels, resolution, resolution));
            if grayscale {
                let g = img.to_luma32f();
                for (x, y, p) in g.enumerate_pixels() {
                    arr[[0, y as usize, x as usize]] = p.0[0] as f64;
                }
            } else {
                let rgb = img.to_rgb32f();
                for (x, y, p) in rgb.enumerate_pixels() {
                    for c in 0..3 {
                        arr[[c, y as usize, x as usize]] = p.0[c] as f64;
                    }
                }
            }
            Sample {
                image: arr.mapv(|v| v.clamp(0.0, 1.0)),
                label,
                id: id as u64,
            }
        })
        .collect();
    Ok(samples)
}

/// Assigns disjoint samples to clients. A fraction `label_skew` of each client's
/// samples comes from its dominant label (`client index mod classes`); the rest is
/// drawn round-robin over labels.
pub fn partition_clients(
    samples: &[Sample],
    spec: &PartitionSpec,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    spec.validate(samples.len())?;
    let classes = samples.iter().map(|s| s.label).max().map_or(0, |m| m + 1);
    let mut rng = rng::stream(seed, &[tag::PARTITION]);
    let mut pools: Vec<Vec<&Sample>> = vec![Vec::new(); classes];
    for s in samples {
        pools[s.label].push(s);
    }
    for pool in pools.iter_mut() {
        pool.shuffle(&mut rng);
    }

    let mut clients = Vec::with_capacity(spec.client_sizes.len());
    for (idx, (&size, &batch)) in spec.client_sizes.iter().zip(&spec.batch_sizes).enumerate() {
        let dominant = idx % classes;
        let dominant_count = (spec.label_skew * size as f64).round() as usize;
        if pools[dominant].len() < dominant_count {
            return Err(Error::Config(format!(
                "label_skew {} infeasible: client {} needs {dominant_count} samples of label {dominant}, {} left",
                spec.label_skew,
                idx + 1,
                pools[dominant].len()
            )));
        }
        let mut chosen: Vec<Sample> = pools[dominant]
            .drain(..dominant_count)
            .cloned()
            .collect();
        let mut label = idx % classes;
        while chosen.len() < size {
            if pools.iter().all(|p| p.is_empty()) {
                return Err(Error::Config("ran out of samples while partitioning".into()));
            }
            if let Some(s) = pools[label].pop() {
                chosen.push(s.clone());
            }
            label = (label + 1) % classes;
        }
        clients.push(ClientDataset {
            client_id: idx + 1,
            samples: chosen,
            batch_size: batch,
        });
    }
    Ok(clients)
}

/// Per-channel mean and (population) standard deviation over a set of images.
pub fn channel_stats(samples: &[Sample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("cannot compute statistics of an empty set".into()))?;
    let c = first.channels();
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    let mut count = 0usize;
    for s in samples {
        for (ch, plane) in s.image.axis_iter(Axis(0)).enumerate() {
            mean[ch] += plane.sum();
            sq[ch] += plane.iter().map(|v| v * v).sum::<f64>();
        }
        count += s.height() * s.width();
    }
    let n = count as f64;
    let std = mean
        .iter()
        .zip(&sq)
        .map(|(m, q)| (q / n - (m / n).powi(2)).max(0.0).sqrt())
        .collect();
    let mean = mean.into_iter().map(|m| m / n).collect();
    Ok((mean, std))
}

/// `(image - mean) / std` channel-wise on a `[C, H, W]` image.
pub fn normalize(image: &Array3<f64>, mean: &[f64], std: &[f64]) -> Result<Array3<f64>> {
    check_channel_params(image, mean, std)?;
    let mut out = image.clone();
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        plane.mapv_inplace(|v| (v - mean[c]) / std[c]);
    }
    Ok(out)
}

pub fn denormalize(image: &Array3<f64>, mean: &[f64], std: &[f64]) -> Result<Array3<f64>> {
    check_channel_params(image, mean, std)?;
    let mut out = image.clone();
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        plane.mapv_inplace(|v| v * std[c] + mean[c]);
    }
    Ok(out)
}

fn check_channel_params(image: &Array3<f64>, mean: &[f64], std: &[f64]) -> Result<()> {
    let c = image.shape()[0];
    if mean.len() != c || std.len() != c {
        return Err(Error::Config(format!(
            "{c} channels but {} means and {} stds",
            mean.len(),
            std.len()
        )));
    }
    if let Some(s) = std.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Numeric(format!("standard deviation {s} is not positive")));
    }
    Ok(())
}

/// Stacks images into an `[N, C, H, W]` batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Array3<f64>>) -> Tensor {
    let views: Vec<_> = images.into_iter().map(|a| a.view()).collect();
    assert!(!views.is_empty(), "cannot stack an empty batch");
    ndarray::stack(Axis(0), &views).unwrap().into_dyn()
}

/// Splits an `[N, C, H, W]` batch back into images.
pub fn unstack_images(batch: &Tensor) -> Vec<Array3<f64>> {
    batch
        .axis_iter(Axis(0))
        .map(|v| {
            v.to_owned()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("batch must be 4-D")
        })
        .collect()
}

/// Pixelwise mean image of a set (the "prior" image).
pub fn mean_image(samples: &[Sample]) -> Result<Array3<f64>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("mean image of an empty set".into()))?;
    let mut acc = Array3::zeros(first.image.raw_dim());
    for s in samples {
        acc += &s.image;
    }
    Ok(acc / samples.len() as f64)
}

/// Splits off `count` samples chosen by a seeded shuffle; returns (taken, rest),
/// both in original order.
pub fn split_off(samples: Vec<Sample>, count: usize, seed: u64, stream_tag: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    let mut rng = rng::stream(seed, &[tag::SPLIT, stream_tag]);
    idx.shuffle(&mut rng);
    let mut take = vec![false; samples.len()];
    for &i in idx.iter().take(count) {
        take[i] = true;
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (s, t) in samples.into_iter().zip(take) {
        if t {
            a.push(s);
        } else {
            b.push(s);
        }
    }
    (a, b)
}

/// One row per assigned sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub label: usize,
    pub client: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn from_clients(clients: &[ClientDataset]) -> Self {
        let entries = clients
            .iter()
            .flat_map(|c| {
                c.samples.iter().map(move |s| ManifestEntry {
                    id: s.id,
                    label: s.label,
                    client: c.client_id,
                })
            })
            .collect();
        Self { entries }
    }
}

/// Broadcasts an `[H, W]` map over the channels of a `[C, H, W]` image.
pub fn broadcast_map(map: &ndarray::Array2<f64>, channels: usize) -> Array3<f64> {
    let (h, w) = map.dim();
    map.broadcast((channels, h, w)).unwrap().to_owned()
}

/// Channel mean of a `[C, H, W]` image.
pub fn channel_mean(image: &Array3<f64>) -> ndarray::Array2<f64> {
    image.mean_axis(Axis(0)).unwrap()
}

pub(crate) fn image_tensor(image: &Array3<f64>) -> Tensor {
    image
        .clone()
        .insert_axis(Axis(0))
        .into_dyn()
        .into_shape_with_order(IxDyn(&[1, image.shape()[0], image.shape()[1], image.shape()[2]]))
        .unwrap()
}
