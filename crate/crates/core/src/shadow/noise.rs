//! Per-pixel noise maps: foreground attenuation, relative noise, histogram
//! equalization, momentum smoothing and absolute scaling. All maps are
//! `[H, W]`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::models::saliency::SaliencyMap;

pub const N_GRAY: usize = 256;

/// Softmax over every entry of a map.
pub fn softmax_map(m: &Array2<f64>) -> Array2<f64> {
    let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = m.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// Indices (row-major) of the `k` largest entries; ties go to the lower index.
fn top_k(values: &Array2<f64>, k: usize) -> Vec<usize> {
    let flat: Vec<f64> = values.iter().copied().collect();
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Binary mask of the top `ceil(top_fraction * H * W)` pixels.
pub fn top_mask(values: &Array2<f64>, top_fraction: f64) -> Array2<f64> {
    let k = ((top_fraction * values.len() as f64).ceil() as usize).min(values.len());
    let mut mask = Array2::zeros(values.raw_dim());
    let w = values.ncols();
    for i in top_k(values, k) {
        mask[[i / w, i % w]] = 1.0;
    }
    mask
}

/// Foreground map: the saliency is min-max scaled to `[0, 1]`, masked to
/// its top fraction, divided by `t` and softmax-normalized over all pixels.
/// A flat saliency map gives the uniform map.
pub fn foreground_map(saliency: &SaliencyMap, top_fraction: f64, t: f64) -> Array2<f64> {
    let v = &saliency.values;
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(*x), h.max(*x)));
    if !(hi > lo) {
        if saliency.degenerate || hi == 0.0 {
            log::warn!("saliency map from {} is empty, foreground map is uniform", saliency.source_layer);
        }
        return Array2::from_elem(v.raw_dim(), 1.0 / v.len() as f64);
    }
    let scaled = v.mapv(|x| (x - lo) / (hi - lo));
    let mask = top_mask(&scaled, top_fraction);
    softmax_map(&(&mask * &scaled / t))
}

/// Channel-mean squared error per pixel of two `[C, H, W]` images.
pub fn error_map(x: &ndarray::Array3<f64>, x_rec: &ndarray::Array3<f64>) -> Array2<f64> {
    let d = (x - x_rec).mapv(|v| v * v);
    d.mean_axis(ndarray::Axis(0)).unwrap()
}

/// `N1 = 1 / softmax(M / t)`.
pub fn relative_noise_from_error(m: &Array2<f64>, t: f64) -> Array2<f64> {
    softmax_map(&(m / t)).mapv(|p| 1.0 / p)
}

pub fn relative_noise(x: &ndarray::Array3<f64>, x_rec: &ndarray::Array3<f64>, t: f64) -> Array2<f64> {
    relative_noise_from_error(&error_map(x, x_rec), t)
}

/// Min-max quantization onto `0..N_GRAY`. A constant map is one level (0).
pub fn quantize(n: &Array2<f64>) -> Array2<usize> {
    let (lo, hi) = n.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(*x), h.max(*x)));
    if !(hi > lo) {
        return Array2::zeros(n.raw_dim());
    }
    let top = (N_GRAY - 1) as f64;
    n.mapv(|v| (((v - lo) / (hi - lo)) * top).round() as usize)
}

/// Equalization transfer `G(z) = (N_gray - 1) * sum_{i <= z} p(r_i)` over
/// the level histogram, returned for every level.
pub fn equalization_transfer(levels: &Array2<usize>) -> Vec<f64> {
    let mut hist = vec![0usize; N_GRAY];
    for &l in levels.iter() {
        hist[l] += 1;
    }
    let total = levels.len() as f64;
    let mut acc = 0.0;
    hist.iter()
        .map(|&c| {
            acc += c as f64 / total;
            (N_GRAY - 1) as f64 * acc
        })
        .collect()
}

/// Equalized levels `G(level)` for each pixel, on the `0..=255` scale.
pub fn equalized_levels(n1: &Array2<f64>) -> Array2<f64> {
    let q = quantize(n1);
    let g = equalization_transfer(&q);
    q.mapv(|l| g[l])
}

/// `N2 = softmax(G(N1) / (N_gray - 1))`: equalized levels brought back to
/// `[0, 1]` before the softmax.
pub fn equalize_noise(n1: &Array2<f64>) -> Array2<f64> {
    let (lo, hi) = n1.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(*x), h.max(*x)));
    if !(hi > lo) {
        return Array2::from_elem(n1.raw_dim(), 1.0 / n1.len() as f64);
    }
    softmax_map(&(equalized_levels(n1) / (N_GRAY - 1) as f64))
}

/// `N3 = alpha * N3_prev + (1 - alpha) * N2`; the first call returns `N2`.
pub fn ema_noise(prev: Option<&Array2<f64>>, n2: &Array2<f64>, alpha: f64) -> Array2<f64> {
    match prev {
        None => n2.clone(),
        Some(p) => p * alpha + n2 * (1.0 - alpha),
    }
}

/// `clamp(r / R, alpha_min, alpha_max)`
pub fn alpha_cam(r: usize, total: usize, alpha_min: f64, alpha_max: f64) -> f64 {
    let ratio = if total == 0 { 0.0 } else { r as f64 / total as f64 };
    ratio.max(alpha_min).min(alpha_max)
}

/// `N4 = N3 - alpha_cam * sign(N3) * L_cam`
pub fn attenuate_foreground(n3: &Array2<f64>, l_cam: &Array2<f64>, alpha: f64) -> Array2<f64> {
    let mut out = n3.clone();
    ndarray::Zip::from(&mut out).and(l_cam).for_each(|o, &l| {
        let s = if *o > 0.0 {
            1.0
        } else if *o < 0.0 {
            -1.0
        } else {
            0.0
        };
        *o -= alpha * s * l;
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Fix,
    #[default]
    Increase,
    Decrease,
}

/// Absolute noise weight `w_N` for round `r` of `R`.
pub fn noise_weight(schedule: Schedule, alpha_n: f64, r: usize, total: usize) -> f64 {
    let ratio = if total == 0 { 0.0 } else { r as f64 / total as f64 };
    match schedule {
        Schedule::Fix => alpha_n,
        Schedule::Increase => alpha_n * ratio.exp(),
        Schedule::Decrease => alpha_n * (-ratio).exp(),
    }
}

/// `N = |max(x) / max(N4) * w| * N4`; zero when `max(N4)` is zero.
pub fn scale_noise(n4: &Array2<f64>, x_max: f64, w: f64) -> Array2<f64> {
    let m = n4.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == 0.0 || !m.is_finite() {
        log::warn!("relative noise map has zero maximum, no noise added");
        return Array2::zeros(n4.raw_dim());
    }
    n4 * (x_max / m * w).abs()
}
