//! FedAvg simulation: local SGD, weighted aggregation, evaluation and the
//! round loop.

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{stack_images, ClientDataset, Sample};
use crate::error::{Error, Result};
use crate::models::task::{Batch, BnStats, TaskModel};
use crate::rng::{self, tag};
use crate::tensors::GradientSet;

/// What a client uploads after one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub round: usize,
    /// `(theta_before - theta_after) / lr`
    pub gradients: GradientSet,
    pub bn_stats: BnStats,
    pub sample_count: usize,
    /// SGD steps taken locally (protocol metadata, visible to the server).
    pub local_steps: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub lr: f64,
    /// Local epochs per global round.
    pub local_rounds: usize,
}

/// Seeded mini-batch order for one (client, round, epoch).
pub fn batch_order(client: &ClientDataset, seed: u64, round: usize, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..client.len()).collect();
    let mut rng = rng::stream(seed, &[tag::LOCAL_TRAIN, client.client_id as u64, round as u64, epoch as u64]);
    idx.shuffle(&mut rng);
    idx.chunks(client.batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Local SGD from the broadcast model. Parameters are tracked as
/// `theta_0 - lr * S` with `S` the running gradient sum, so the uploaded
/// update is `S` and the server reproduces `theta_after` bit-for-bit.
pub fn local_train(
    global: &TaskModel,
    client: &ClientDataset,
    cfg: &LocalTrainConfig,
    seed: u64,
    round: usize,
) -> Result<(TaskModel, ClientUpdate)> {
    if client.is_empty() {
        return Err(Error::Data(format!("client {} has no samples", client.client_id)));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let mut model = global.clone();
    let mut sum = global.params.zeros_like();
    let mut steps = 0;
    for epoch in 0..cfg.local_rounds {
        for chunk in batch_order(client, seed, round, epoch) {
            let batch = Batch::from_samples(chunk.iter().map(|&i| &client.samples[i]));
            let (g, stats) = model.gradients_with_stats(&batch).map_err(|e| {
                Error::Training(format!("client {} round {round}: {e}", client.client_id))
            })?;
            sum.axpy(1.0, &g);
            let mut params = global.params.clone();
            params.axpy(-cfg.lr, &sum);
            model.params = params;
            model.update_running_stats(&stats, batch.len());
            steps += 1;
        }
    }
    if !sum.all_finite() {
        return Err(Error::Training(format!(
            "client {} round {round}: non-finite update",
            client.client_id
        )));
    }
    let update = ClientUpdate {
        client_id: client.client_id,
        round,
        gradients: sum,
        bn_stats: model.bn_statistics(),
        sample_count: client.len(),
        local_steps: steps,
        batch_size: client.batch_size,
    };
    Ok((model, update))
}

/// Sample-weighted FedAvg step. Updates are reduced in ascending client
/// order whatever order they arrive in.
pub fn aggregate(updates: &[ClientUpdate], global: &TaskModel, lr: f64) -> Result<TaskModel> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Protocol("no client updates to aggregate".into()))?;
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let total: usize = ordered.iter().map(|u| u.sample_count).sum();
    for u in &ordered {
        if u.round != first.round {
            return Err(Error::Protocol(format!(
                "updates from rounds {} and {} mixed",
                first.round, u.round
            )));
        }
        if u.sample_count == 0 {
            return Err(Error::Protocol(format!("client {} reported zero samples", u.client_id)));
        }
        global.params.check_compatible(&u.gradients)?;
        global.bn.check_compatible(&u.bn_stats)?;
    }
    let mut mean = global.params.zeros_like();
    let mut bn = global.bn.clone();
    for layer in bn.layers.iter_mut() {
        layer.mean.fill(0.0);
        layer.var.fill(0.0);
    }
    for u in &ordered {
        let w = u.sample_count as f64 / total as f64;
        mean.axpy(w, &u.gradients);
        for (acc, l) in bn.layers.iter_mut().zip(&u.bn_stats.layers) {
            acc.mean.scaled_add(w, &l.mean);
            acc.var.scaled_add(w, &l.var);
        }
    }
    let mut next = global.clone();
    next.params.axpy(-lr, &mean);
    next.bn = bn;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Accuracy and macro-F1 from label/prediction pairs. F1 is averaged over
/// classes that occur as a label or a prediction.
pub fn classification_metrics(labels: &[usize], preds: &[usize], classes: usize) -> EvalMetrics {
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    for (&y, &p) in labels.iter().zip(preds) {
        if y == p {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fneg[y] += 1;
        }
    }
    let mut f1_sum = 0.0;
    let mut seen = 0;
    for c in 0..classes {
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        if denom == 0 {
            continue;
        }
        seen += 1;
        f1_sum += 2.0 * tp[c] as f64 / denom as f64;
    }
    let correct: usize = tp.iter().sum();
    EvalMetrics {
        accuracy: correct as f64 / labels.len().max(1) as f64,
        macro_f1: if seen == 0 { 0.0 } else { f1_sum / seen as f64 },
    }
}

pub fn evaluate(model: &TaskModel, test: &[Sample]) -> Result<EvalMetrics> {
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let logits = model.predict_logits(&stack_images(test.iter().map(|s| &s.image)));
    let preds: Vec<usize> = logits
        .axis_iter(Axis(0))
        .map(|row| argmax(row.iter().copied()))
        .collect();
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    Ok(classification_metrics(&labels, &preds, model.arch.classes))
}

/// Hex SHA-256 over parameter names, shapes, values and BN statistics.
pub fn model_digest(model: &TaskModel) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.params.iter() {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.iter() {
            h.update(v.to_le_bytes());
        }
    }
    for l in &model.bn.layers {
        let feed = |h: &mut Sha256, a: &Array1<f64>| a.iter().for_each(|v| h.update(v.to_le_bytes()));
        feed(&mut h, &l.mean);
        feed(&mut h, &l.var);
    }
    hex::encode(h.finalize())
}

/// Context handed to a client's defense each round.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext {
    pub round: usize,
    pub total_rounds: usize,
    pub train: LocalTrainConfig,
    pub seed: u64,
}

/// Client-side training procedure for one round. One instance per client,
/// so implementations may keep per-client state across rounds.
pub trait ClientTrainer: Send {
    fn train_round(&mut self, ctx: &RoundContext, client: &ClientDataset, global: &TaskModel) -> Result<ClientUpdate>;
}

/// Plain local training.
#[derive(Debug, Default, Clone)]
pub struct PlainTrainer;

impl ClientTrainer for PlainTrainer {
    fn train_round(&mut self, ctx: &RoundContext, client: &ClientDataset, global: &TaskModel) -> Result<ClientUpdate> {
        Ok(local_train(global, client, &ctx.train, ctx.seed, ctx.round)?.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlConfig {
    pub rounds: usize,
    pub train: LocalTrainConfig,
    /// Seed of the per-(client, round) batch streams.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 0 is the evaluation of the initial model.
    pub round: usize,
    pub digest: String,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingTrace {
    pub records: Vec<RoundRecord>,
    /// Set when a round failed; the run stops there.
    pub failure: Option<String>,
}

impl TrainingTrace {
    pub fn final_record(&self) -> Option<&RoundRecord> {
        self.records.last()
    }
}

/// Everything an observer sees at the end of a round.
pub struct RoundView<'a> {
    pub round: usize,
    /// The model that was broadcast at the start of the round.
    pub broadcast: &'a TaskModel,
    pub updates: &'a [ClientUpdate],
    pub aggregated: &'a TaskModel,
}

/// FedAvg loop. Clients train in parallel; each owns its trainer, so the
/// result does not depend on scheduling. `observe` runs after every round.
pub fn run_federated(
    cfg: &FlConfig,
    initial: TaskModel,
    clients: &[ClientDataset],
    trainers: &mut [Box<dyn ClientTrainer>],
    test: &[Sample],
    mut observe: impl FnMut(&RoundView) -> Result<()>,
) -> Result<(TaskModel, TrainingTrace)> {
    if clients.len() != trainers.len() {
        return Err(Error::Config(format!(
            "{} clients but {} trainers",
            clients.len(),
            trainers.len()
        )));
    }
    let mut trace = TrainingTrace::default();
    let record = |round: usize, m: &TaskModel| -> Result<RoundRecord> {
        let e = evaluate(m, test)?;
        Ok(RoundRecord {
            round,
            digest: model_digest(m),
            accuracy: e.accuracy,
            macro_f1: e.macro_f1,
        })
    };
    trace.records.push(record(0, &initial)?);
    let mut global = initial;
    for round in 1..=cfg.rounds {
        let ctx = RoundContext {
            round,
            total_rounds: cfg.rounds,
            train: cfg.train,
            seed: cfg.seed,
        };
        let results: Vec<Result<ClientUpdate>> = trainers
            .par_iter_mut()
            .zip(clients.par_iter())
            .map(|(t, c)| t.train_round(&ctx, c, &global))
            .collect();
        let mut updates = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(u) => updates.push(u),
                Err(e) => {
                    let msg = format!("round {round}: {e}");
                    log::error!("{msg}");
                    trace.failure = Some(msg);
                    return Ok((global, trace));
                }
            }
        }
        let next = aggregate(&updates, &global, cfg.train.lr)?;
        observe(&RoundView {
            round,
            broadcast: &global,
            updates: &updates,
            aggregated: &next,
        })?;
        global = next;
        let rec = record(round, &global)?;
        log::info!("round {round}: acc {:.3} f1 {:.3}", rec.accuracy, rec.macro_f1);
        trace.records.push(rec);
    }
    Ok((global, trace))
}
