//! Grad-CAM++ saliency on a chosen conv block of the task model.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use shadowdef_autograd::{grad, Var};

use super::task::{Batch, BnMode, TaskModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    /// `[H, W]`, nonnegative.
    pub values: Array2<f64>,
    pub source_layer: String,
    /// Set when the map came out all zero (dead layer or no positive evidence).
    pub degenerate: bool,
}

impl SaliencyMap {
    pub fn new(values: Array2<f64>, source_layer: impl Into<String>) -> Self {
        let degenerate = values.iter().all(|v| *v == 0.0);
        Self {
            values,
            source_layer: source_layer.into(),
            degenerate,
        }
    }
}

/// Resolves a layer name (`block{i}` or `block{i}.conv`) to a block index.
fn block_index(model: &TaskModel, layer: &str) -> Result<usize> {
    let stem = layer.strip_suffix(".conv").unwrap_or(layer);
    stem.strip_prefix("block")
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&i| i < model.arch.widths.len())
        .ok_or_else(|| Error::Config(format!("{layer} is not a conv layer of the task model")))
}

/// Grad-CAM++ maps for every image of `batch`, targeting each image's label.
///
/// Uses the closed-form higher-order weights obtained with an exponential
/// class score, which reduce to powers of the first-order gradient:
/// `alpha = g^2 / (2 g^2 + sum_ij A g^3)`, `w_k = sum_ij alpha relu(g)`,
/// `L = relu(sum_k w_k A_k)`, then bilinear upsampling to the input size.
pub fn cam_saliency(model: &TaskModel, batch: &Batch, layer: &str) -> Result<Vec<SaliencyMap>> {
    let block = block_index(model, layer)?;
    let k = model.arch.classes;
    if let Some(l) = batch.labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("target class {l} out of range")));
    }
    let params = model.params.to_vars(false);
    // leaf copy of the input so the graph reaches the activations
    let x = Var::param(batch.images.clone());
    let out = model.forward(&params, &x, BnMode::Running);
    let act = out.activations[block].clone();
    let n = batch.len();
    let mut select = ArrayD::zeros(IxDyn(&[n, k]));
    for (i, &l) in batch.labels.iter().enumerate() {
        select[[i, l]] = 1.0;
    }
    let score = out.logits.dot(&Var::constant(select));
    let g = grad(&score, &[&act], false).remove(0);
    let a = act.value();
    let g = g.value();

    let side = model.arch.resolution;
    let name = format!("block{block}.conv");
    let maps = (0..n)
        .map(|i| {
            let ai = a.index_axis(Axis(0), i);
            let gi = g.index_axis(Axis(0), i);
            let (c, h, w) = (ai.shape()[0], ai.shape()[1], ai.shape()[2]);
            let mut cam = Array2::<f64>::zeros((h, w));
            for ch in 0..c {
                let ac = ai.index_axis(Axis(0), ch);
                let gc = gi.index_axis(Axis(0), ch);
                let sum_a: f64 = ac.sum();
                let mut weight = 0.0;
                for gv in gc.iter() {
                    let g2 = gv * gv;
                    let denom = 2.0 * g2 + sum_a * g2 * gv;
                    let alpha = if denom != 0.0 { g2 / denom } else { 0.0 };
                    weight += alpha * gv.max(0.0);
                }
                cam.scaled_add(weight, &ac);
            }
            cam.mapv_inplace(|v| v.max(0.0));
            let up = bilinear_resize(&cam, side, side);
            let map = SaliencyMap::new(up.mapv(|v| v.max(0.0)), name.clone());
            if map.degenerate {
                log::warn!("Grad-CAM++ map for image {i} is all zero");
            }
            map
        })
        .collect();
    Ok(maps)
}

/// Bilinear resize with half-pixel centres.
pub fn bilinear_resize(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let sample = |pos: f64, len: usize| -> (usize, usize, f64) {
        let p = pos.clamp(0.0, (len - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, p - lo as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let y = (i as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
        let x = (j as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
        let (y0, y1, fy) = sample(y, h);
        let (x0, x1, fx) = sample(x, w);
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}
