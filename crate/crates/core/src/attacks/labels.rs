//! Label inference from the classifier-head gradients.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl::ClientUpdate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferredLabels {
    pub labels: Vec<usize>,
    /// Set for batches larger than one, where no exact rule applies.
    pub heuristic: bool,
    pub low_confidence: bool,
}

/// With non-negative head inputs, the true class of a single sample is the
/// only head row whose gradient is non-positive everywhere. Larger batches
/// take the classes with the most negative row sums; when the batch is
/// larger than the class count, counts are estimated from the bias
/// gradient assuming near-uniform predictions.
pub fn infer_labels(update: &ClientUpdate, batch_size: usize) -> Result<InferredLabels> {
    let w = update
        .gradients
        .get("fc.weight")
        .ok_or_else(|| Error::Attack("update has no fc.weight gradient".into()))?;
    let b = update.gradients.get("fc.bias");
    let k = w.shape()[0];
    if batch_size == 0 {
        return Err(Error::Attack("batch size must be positive".into()));
    }
    let rows: Vec<f64> = w.axis_iter(Axis(0)).map(|r| r.sum()).collect();
    let all_zero = w.iter().all(|v| *v == 0.0) && b.is_none_or(|b| b.iter().all(|v| *v == 0.0));
    let bias: Vec<f64> = match b {
        Some(b) => b.iter().copied().collect(),
        None => vec![0.0; k],
    };
    // rows scored by their sum, falling back to the bias when the head input was zero
    let score: Vec<f64> = if w.iter().all(|v| *v == 0.0) { bias.clone() } else { rows };
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &c| score[a].total_cmp(&score[c]).then(a.cmp(&c)));

    if batch_size == 1 {
        let negative: Vec<usize> = w
            .axis_iter(Axis(0))
            .enumerate()
            .filter(|(_, r)| r.iter().all(|v| *v <= 0.0) && r.iter().any(|v| *v < 0.0))
            .map(|(i, _)| i)
            .collect();
        let (label, confident) = match negative.as_slice() {
            [only] => (*only, true),
            _ => (order[0], false),
        };
        return Ok(InferredLabels {
            labels: vec![label],
            heuristic: false,
            low_confidence: all_zero || !confident,
        });
    }
    let labels = if batch_size <= k {
        order[..batch_size].to_vec()
    } else {
        estimate_counts(&bias, batch_size, update.local_steps.max(1))
    };
    Ok(InferredLabels {
        labels,
        heuristic: true,
        low_confidence: all_zero,
    })
}

/// Largest-remainder allocation of `n` labels from the per-step bias
/// gradient `mean(p) - frac`, taking `mean(p)` as uniform.
fn estimate_counts(bias_sum: &[f64], n: usize, steps: usize) -> Vec<usize> {
    let k = bias_sum.len();
    let frac: Vec<f64> = bias_sum
        .iter()
        .map(|g| (1.0 / k as f64 - g / steps as f64).max(0.0))
        .collect();
    let total: f64 = frac.iter().sum();
    let share: Vec<f64> = if total > 0.0 {
        frac.iter().map(|f| f / total * n as f64).collect()
    } else {
        vec![n as f64 / k as f64; k]
    };
    let mut counts: Vec<usize> = share.iter().map(|s| s.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..k).collect();
    rest.sort_by(|&a, &b| (share[b] - share[b].floor()).total_cmp(&(share[a] - share[a].floor())).then(a.cmp(&b)));
    let mut missing = n - counts.iter().sum::<usize>();
    for &i in rest.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[i] += 1;
        missing -= 1;
    }
    counts
        .iter()
        .enumerate()
        .flat_map(|(c, &m)| std::iter::repeat_n(c, m))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;
    use crate::fl::{local_train, LocalTrainConfig};
    use crate::models::task::{Batch, TaskArch, TaskModel};

    fn update_for(model: &TaskModel, samples: &[crate::data::Sample]) -> ClientUpdate {
        let client = crate::data::ClientDataset {
            client_id: 1,
            samples: samples.to_vec(),
            batch_size: samples.len(),
        };
        local_train(model, &client, &LocalTrainConfig { lr: 0.1, local_rounds: 1 }, 0, 1)
            .unwrap()
            .1
    }

    #[test]
    fn single_sample_labels_are_recovered() {
        let samples = generate_synthetic_dataset(100, 8, 1, 5, 11).unwrap();
        for (i, s) in samples.iter().enumerate() {
            let model = TaskModel::new(TaskArch::new(1, 8, 5), i as u64).unwrap();
            let u = update_for(&model, std::slice::from_ref(s));
            let inf = infer_labels(&u, 1).unwrap();
            assert_eq!(inf.labels, vec![s.label], "fixture {i}");
            assert!(!inf.low_confidence);
        }
    }

    #[test]
    fn repeated_class_appears_in_output() {
        let samples = generate_synthetic_dataset(6, 8, 1, 3, 2).unwrap();
        let pair: Vec<_> = samples.iter().filter(|s| s.label == 2).take(2).cloned().collect();
        let model = TaskModel::new(TaskArch::new(1, 8, 3), 1).unwrap();
        let inf = infer_labels(&update_for(&model, &pair), 2).unwrap();
        assert!(inf.labels.contains(&2));
        assert!(inf.heuristic);
    }

    #[test]
    fn counts_follow_bias_gradient_for_large_batches() {
        let samples = generate_synthetic_dataset(8, 8, 1, 2, 2).unwrap();
        let model = TaskModel::new(TaskArch::new(1, 8, 2), 1).unwrap();
        let inf = infer_labels(&update_for(&model, &samples), 8).unwrap();
        assert_eq!(inf.labels.len(), 8);
        let ones = inf.labels.iter().filter(|l| **l == 1).count();
        assert!((3..=5).contains(&ones), "{:?}", inf.labels);
        let _ = Batch::from_samples(&samples);
    }

    #[test]
    fn zero_gradients_are_low_confidence() {
        let model = TaskModel::new(TaskArch::new(1, 8, 2), 1).unwrap();
        let u = ClientUpdate {
            client_id: 1,
            round: 1,
            gradients: model.params.zeros_like(),
            bn_stats: model.bn.clone(),
            sample_count: 1,
            local_steps: 1,
            batch_size: 1,
        };
        assert!(infer_labels(&u, 1).unwrap().low_confidence);
    }
}
