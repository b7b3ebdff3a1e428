//! Orchestration of one run: data, federated training with the configured
//! defense, attacks on snapshotted uploads, and leakage metrics.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use shadowdef_core::attacks::{run_attack, AttackConfig, AttackResult};
use shadowdef_core::data::{
    generate_synthetic_dataset, load_image_folder, mean_image, partition_clients, split_off, ClientDataset,
    DatasetManifest, Sample,
};
use shadowdef_core::defenses::{BaselineTrainer, DefenseConfig};
use shadowdef_core::fl::{run_federated, ClientTrainer, ClientUpdate, FlConfig, LocalTrainConfig, PlainTrainer, TrainingTrace};
use shadowdef_core::metrics::{
    best_match, embed, iip, image_metrics, rdlv, target_region_metrics, train_reference, ActivationDistance,
    ImageMetrics, PerceptualDistance,
};
use shadowdef_core::models::checkpoint;
use shadowdef_core::models::generator::{pretrain_shadow, GeneratorArch, ShadowGenerator};
use shadowdef_core::models::saliency::cam_saliency;
use shadowdef_core::models::task::{Batch, TaskModel};
use shadowdef_core::rng::{derive_seed, tag};
use shadowdef_core::shadow::ShadowTrainer;
use shadowdef_core::{Error, Result};

use crate::config::{DatasetKind, ExperimentConfig};
use crate::report::{emit_report, write_json};

pub const SCHEMA_VERSION: u32 = 1;
pub const GENERATOR_KIND: &str = "shadow_generator";
const SPLIT_CLIENTS: u64 = 1;
const SPLIT_PUBLIC: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub method: String,
    pub config_hash: String,
    pub section_hashes: std::collections::BTreeMap<String, String>,
    /// Canonical TOML of the resolved configuration.
    pub config: String,
    pub status: RunStatus,
    pub failure: Option<String>,
    pub files: Vec<String>,
}

/// An attack round's view of the protocol: the broadcast model and every upload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateSnapshot {
    pub round: usize,
    pub broadcast: TaskModel,
    pub updates: Vec<ClientUpdate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub attack: String,
    pub result: AttackResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub attack: String,
    pub round: usize,
    pub client: usize,
    pub slot: usize,
    /// Sample id of the best-matching original.
    pub matched: u64,
    pub whole: ImageMetrics,
    pub target: ImageMetrics,
    pub rdlv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdlvRecord {
    pub attack: String,
    pub round: usize,
    pub client: usize,
    pub rdlv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IipRecord {
    pub attack: String,
    pub round: usize,
    pub k: usize,
    pub iip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricRecords {
    pub images: Vec<ImageRecord>,
    pub rdlv: Vec<RdlvRecord>,
    pub iip: Vec<IipRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub data_s: f64,
    pub pretrain_s: f64,
    pub train_s: f64,
    pub attack_s: f64,
    pub metrics_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub manifest: Manifest,
    pub trace: TrainingTrace,
    pub attacks: Vec<AttackRecord>,
    pub records: MetricRecords,
}

impl RunArtifacts {
    pub fn final_f1(&self) -> Option<f64> {
        self.trace.final_record().map(|r| r.macro_f1)
    }
}

pub struct Data {
    pub clients: Vec<ClientDataset>,
    pub public: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Data> {
    let d = &cfg.dataset;
    let seed = cfg.seeds.data;
    let need = cfg.partition.total() + d.public_size + d.test_size;
    let all = match d.kind {
        DatasetKind::Synthetic => generate_synthetic_dataset(need, d.resolution, d.channels, d.classes, seed)?,
        DatasetKind::Folder => {
            let path = d.path.as_ref().ok_or_else(|| Error::Config("dataset.path is required".into()))?;
            let s = load_image_folder(path, d.resolution)?;
            if s.len() < need {
                return Err(Error::Config(format!("{} has {} images, the config needs {need}", path.display(), s.len())));
            }
            if s[0].channels() != d.channels {
                return Err(Error::Config(format!(
                    "{} holds {}-channel images but dataset.channels = {}",
                    path.display(),
                    s[0].channels(),
                    d.channels
                )));
            }
            s
        }
    };
    let (pool, rest) = split_off(all, cfg.partition.total(), seed, SPLIT_CLIENTS);
    let (public, rest) = split_off(rest, d.public_size, seed, SPLIT_PUBLIC);
    let test = rest.into_iter().take(d.test_size).collect();
    let clients = partition_clients(&pool, &cfg.partition, seed)?;
    Ok(Data { clients, public, test })
}

fn pretrained_generator(cfg: &ExperimentConfig, public: &[Sample], seed: u64) -> Result<ShadowGenerator> {
    let d = &cfg.dataset;
    let g = ShadowGenerator::new(GeneratorArch::new(d.channels, d.resolution), seed)?;
    let (g, report) = pretrain_shadow(
        &g,
        public,
        cfg.generator.pretrain_steps,
        cfg.generator.pretrain_lr,
        derive_seed(seed, &[tag::PRETRAIN]),
    )?;
    if let Some(l) = report.losses.last() {
        log::info!("generator pretrained for {} steps, final loss {l:.4e}", report.losses.len());
    }
    Ok(g)
}

/// The defender's shadow generator: loaded from a checkpoint or pretrained
/// on the public split with the defense seed.
pub fn defender_generator(cfg: &ExperimentConfig, public: &[Sample]) -> Result<ShadowGenerator> {
    match &cfg.generator.checkpoint {
        Some(p) => checkpoint::load(p, GENERATOR_KIND),
        None => pretrained_generator(cfg, public, derive_seed(cfg.seeds.defense, &[tag::GENERATOR_INIT, 0])),
    }
}

/// The attacker's generator: same public split, a seed stream disjoint from the defender's.
pub fn attacker_generator(cfg: &ExperimentConfig, public: &[Sample]) -> Result<ShadowGenerator> {
    pretrained_generator(cfg, public, derive_seed(cfg.seeds.attack, &[tag::GENERATOR_INIT, 1]))
}

fn trainers(cfg: &ExperimentConfig, n: usize, generator: Option<&ShadowGenerator>) -> Result<Vec<Box<dyn ClientTrainer>>> {
    (0..n)
        .map(|i| -> Result<Box<dyn ClientTrainer>> {
            let seed = derive_seed(cfg.seeds.defense, &[i as u64]);
            Ok(match &cfg.defense {
                DefenseConfig::None => Box::new(PlainTrainer),
                DefenseConfig::Shadow(sc) => {
                    let g = generator.ok_or_else(|| Error::Config("shadow defense needs a generator".into()))?;
                    Box::new(ShadowTrainer::new(sc.clone(), g.clone(), seed)?)
                }
                other => Box::new(BaselineTrainer::new(other.clone(), seed)?),
            })
        })
        .collect()
}

/// Runs every configured attack against every upload of a snapshot, in
/// parallel over (attack, client); results keep that order.
pub fn attack_snapshot(
    snapshot: &UpdateSnapshot,
    attacks: &[AttackConfig],
    generator: Option<&ShadowGenerator>,
) -> Result<Vec<AttackRecord>> {
    let jobs: Vec<(&AttackConfig, &ClientUpdate)> = attacks
        .iter()
        .flat_map(|a| snapshot.updates.iter().map(move |u| (a, u)))
        .collect();
    jobs.par_iter()
        .map(|(a, u)| {
            let result = run_attack(u, &snapshot.broadcast, generator, a)?;
            Ok(AttackRecord {
                attack: a.name().to_string(),
                result,
            })
        })
        .collect()
}

fn save_json<T: Serialize>(dir: &Path, rel: &str, value: &T, files: &mut Vec<String>) -> Result<()> {
    write_json(&dir.join(rel), value)?;
    files.push(rel.to_string());
    Ok(())
}

/// Metric computation for one attack record; the harness owns the
/// originals, the attack never sees them.
fn score_record(
    rec: &AttackRecord,
    client: &ClientDataset,
    model: &TaskModel,
    cfg: &ExperimentConfig,
    perceptual: Option<&dyn PerceptualDistance>,
) -> Result<Vec<ImageRecord>> {
    let originals: Vec<Array3<f64>> = client.samples.iter().map(|s| s.image.clone()).collect();
    let prior = mean_image(&client.samples)?;
    let matches = best_match(&rec.result.reconstructions, &originals, 1.0);
    let layer = format!("block{}", model.arch.widths.len() - 1);
    let saliency = cam_saliency(model, &Batch::from_samples(&client.samples), &layer)?;
    rec.result
        .reconstructions
        .iter()
        .zip(&matches)
        .enumerate()
        .map(|(slot, (x_hat, &j))| {
            let x = &originals[j];
            Ok(ImageRecord {
                attack: rec.attack.clone(),
                round: rec.result.round,
                client: client.client_id,
                slot,
                matched: client.samples[j].id,
                whole: image_metrics(x_hat, x, 1.0, perceptual)?,
                target: target_region_metrics(x_hat, x, &saliency[j], cfg.metrics.top_fraction, 1.0, perceptual)?.metrics,
                rdlv: rdlv(x, x_hat, &prior, 1.0),
            })
        })
        .collect()
}

pub fn compute_metrics(
    cfg: &ExperimentConfig,
    data: &Data,
    snapshots: &[UpdateSnapshot],
    attacks: &[AttackRecord],
) -> Result<MetricRecords> {
    let reference = train_reference(&data.public, cfg.arch(), cfg.metrics.reference_epochs, cfg.seeds.model)?;
    let perceptual = ActivationDistance { model: reference.clone() };
    let p: Option<&dyn PerceptualDistance> = if cfg.metrics.perceptual { Some(&perceptual) } else { None };
    let client_of = |id: usize| data.clients.iter().find(|c| c.client_id == id);
    let model_at = |round: usize| snapshots.iter().find(|s| s.round == round).map(|s| &s.broadcast);
    let per_record: Vec<Vec<ImageRecord>> = attacks
        .par_iter()
        .map(|rec| {
            let client = client_of(rec.result.client_id)
                .ok_or_else(|| Error::Data(format!("no client {}", rec.result.client_id)))?;
            let model = model_at(rec.result.round)
                .ok_or_else(|| Error::Data(format!("no snapshot for round {}", rec.result.round)))?;
            score_record(rec, client, model, cfg, p)
        })
        .collect::<Result<_>>()?;
    let mut out = MetricRecords::default();
    for imgs in &per_record {
        if let Some(first) = imgs.first() {
            let vals: Vec<f64> = imgs.iter().filter_map(|r| r.rdlv).collect();
            out.rdlv.push(RdlvRecord {
                attack: first.attack.clone(),
                round: first.round,
                client: first.client,
                rdlv: (vals.len() == imgs.len()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
            });
        }
    }
    out.images = per_record.into_iter().flatten().collect();

    // identifiability against every client training image
    let train: Vec<&Sample> = data.clients.iter().flat_map(|c| &c.samples).collect();
    let train_emb = embed(&reference, &train.iter().map(|s| s.image.clone()).collect::<Vec<_>>());
    let mut groups: Vec<(String, usize)> = out.images.iter().map(|r| (r.attack.clone(), r.round)).collect();
    groups.dedup();
    for (attack, round) in groups {
        let recs: Vec<(&AttackRecord, usize)> = attacks
            .iter()
            .filter(|a| a.attack == attack && a.result.round == round)
            .flat_map(|a| (0..a.result.reconstructions.len()).map(move |s| (a, s)))
            .collect();
        let images: Vec<Array3<f64>> = recs.iter().map(|(a, s)| a.result.reconstructions[*s].clone()).collect();
        let sources: Vec<usize> = out
            .images
            .iter()
            .filter(|r| r.attack == attack && r.round == round)
            .map(|r| train.iter().position(|s| s.id == r.matched).unwrap())
            .collect();
        let rec_emb = embed(&reference, &images);
        for &k in &cfg.metrics.iip_k {
            out.iip.push(IipRecord {
                attack: attack.clone(),
                round,
                k,
                iip: iip(&rec_emb, &train_emb, &sources, k)?,
            });
        }
    }
    Ok(out)
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    write_json(&dir.join("manifest.json"), m)
}

/// Executes a configured run and persists everything under its output
/// directory. Stage failures leave partial artifacts and a failed manifest.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let cfg = config.resolved();
    let dir = cfg.output.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        method: cfg.method(),
        config_hash: cfg.hash()?,
        section_hashes: cfg.section_hashes()?,
        config: cfg.canonical()?,
        status: RunStatus::Running,
        failure: None,
        files: Vec::new(),
    };
    write_manifest(&dir, &manifest)?;
    let mut artifacts = RunArtifacts {
        dir: dir.clone(),
        config: cfg.clone(),
        manifest: manifest.clone(),
        trace: TrainingTrace::default(),
        attacks: Vec::new(),
        records: MetricRecords::default(),
    };
    match execute(&cfg, &dir, &mut artifacts, &mut manifest.files) {
        Ok(()) => manifest.status = RunStatus::Complete,
        Err(e) => {
            log::error!("run failed: {e}");
            manifest.status = RunStatus::Failed;
            manifest.failure = Some(e.to_string());
        }
    }
    artifacts.manifest = manifest.clone();
    let report = emit_report(&artifacts);
    if let Ok(files) = &report {
        manifest.files.extend(files.iter().cloned());
    }
    manifest.files.sort();
    manifest.files.dedup();
    artifacts.manifest = manifest.clone();
    write_manifest(&dir, &manifest)?;
    report?;
    match manifest.failure {
        Some(f) => Err(Error::Training(format!("run stopped: {f}"))),
        None => Ok(artifacts),
    }
}

fn execute(cfg: &ExperimentConfig, dir: &Path, art: &mut RunArtifacts, files: &mut Vec<String>) -> Result<()> {
    let mut timing = Timing {
        data_s: 0.0,
        pretrain_s: 0.0,
        train_s: 0.0,
        attack_s: 0.0,
        metrics_s: 0.0,
    };
    let t = Instant::now();
    let data = prepare_data(cfg)?;
    save_json(dir, "trace/dataset.json", &DatasetManifest::from_clients(&data.clients), files)?;
    timing.data_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let defender = match cfg.defense {
        DefenseConfig::Shadow(_) => Some(defender_generator(cfg, &data.public)?),
        _ => None,
    };
    let needs_attacker = cfg.attacks.iter().any(|a| a.kind == shadowdef_core::attacks::AttackKind::ModelBased);
    let attacker = if needs_attacker { Some(attacker_generator(cfg, &data.public)?) } else { None };
    timing.pretrain_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let initial = TaskModel::new(cfg.arch(), cfg.seeds.model)?;
    let fl = FlConfig {
        rounds: cfg.training.rounds,
        train: LocalTrainConfig {
            lr: cfg.training.lr,
            local_rounds: cfg.training.local_rounds,
        },
        seed: cfg.seeds.model,
    };
    let attack_rounds = cfg.attack_rounds.clone().unwrap_or_default();
    let mut snapshots = Vec::new();
    let mut trainers = trainers(cfg, data.clients.len(), defender.as_ref())?;
    let result = run_federated(&fl, initial, &data.clients, &mut trainers, &data.test, |v| {
        if attack_rounds.contains(&v.round) {
            snapshots.push(UpdateSnapshot {
                round: v.round,
                broadcast: v.broadcast.clone(),
                updates: v.updates.to_vec(),
            });
        }
        Ok(())
    });
    let (_, trace) = result?;
    timing.train_s = t.elapsed().as_secs_f64();
    art.trace = trace.clone();
    save_json(dir, "trace/trace.json", &trace, files)?;
    for s in &snapshots {
        save_json(dir, &format!("updates/round_{:03}.json", s.round), s, files)?;
    }
    if let Some(f) = &trace.failure {
        return Err(Error::Training(f.clone()));
    }

    if cfg.attacks.is_empty() {
        write_json(&dir.join("trace/timing.json"), &timing)?;
        return Ok(());
    }
    let t = Instant::now();
    for s in &snapshots {
        art.attacks.extend(attack_snapshot(s, &cfg.attacks, attacker.as_ref())?);
    }
    timing.attack_s = t.elapsed().as_secs_f64();
    save_json(dir, "recon/results.json", &art.attacks, files)?;

    let t = Instant::now();
    art.records = compute_metrics(cfg, &data, &snapshots, &art.attacks)?;
    timing.metrics_s = t.elapsed().as_secs_f64();
    save_json(dir, "metrics/records.json", &art.records, files)?;
    // wall-clock numbers stay out of the manifest so that reruns match it byte for byte
    write_json(&dir.join("trace/timing.json"), &timing)?;
    Ok(())
}

/// Reads a run directory back; missing pieces of partial runs come back empty.
pub fn load_artifacts(dir: &Path) -> Result<RunArtifacts> {
    let read = |rel: &str| -> Result<Option<String>> {
        let p = dir.join(rel);
        match fs::read_to_string(&p) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(p, e)),
        }
    };
    let manifest: Manifest = serde_json::from_str(
        &read("manifest.json")?.ok_or_else(|| Error::Config(format!("{} has no manifest.json", dir.display())))?,
    )?;
    let config = ExperimentConfig::from_toml_str(&manifest.config)?;
    let parse_or_default = |rel: &str| -> Result<Option<String>> { read(rel) };
    let trace = match parse_or_default("trace/trace.json")? {
        Some(s) => serde_json::from_str(&s)?,
        None => TrainingTrace::default(),
    };
    let attacks = match parse_or_default("recon/results.json")? {
        Some(s) => serde_json::from_str(&s)?,
        None => Vec::new(),
    };
    let records = match parse_or_default("metrics/records.json")? {
        Some(s) => serde_json::from_str(&s)?,
        None => MetricRecords::default(),
    };
    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        config,
        manifest,
        trace,
        attacks,
        records,
    })
}

/// Pretrains the defender generator and writes it as a checkpoint.
pub fn pretrain_to(cfg: &ExperimentConfig, out: &Path) -> Result<ShadowGenerator> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let mut c = cfg.clone();
    c.generator.checkpoint = None;
    let g = defender_generator(&c, &data.public)?;
    checkpoint::save(out, GENERATOR_KIND, &g)?;
    Ok(g)
}

/// Attacks a persisted snapshot with the configured attacks.
pub fn attack_file(cfg: &ExperimentConfig, snapshot: &Path, out: &Path) -> Result<Vec<AttackRecord>> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let text = fs::read_to_string(snapshot).map_err(|e| Error::io(snapshot, e))?;
    let snap: UpdateSnapshot = serde_json::from_str(&text)?;
    let needs_attacker = cfg.attacks.iter().any(|a| a.kind == shadowdef_core::attacks::AttackKind::ModelBased);
    let attacker = if needs_attacker {
        Some(attacker_generator(&cfg, &prepare_data(&cfg)?.public)?)
    } else {
        None
    };
    let records = attack_snapshot(&snap, &cfg.attacks, attacker.as_ref())?;
    write_json(&out.join("results.json"), &records)?;
    crate::report::write_reconstructions(out, &records)?;
    Ok(records)
}
