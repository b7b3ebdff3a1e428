//! Experiment configuration: one TOML document, resolved to a canonical form.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use shadowdef_core::attacks::AttackConfig;
use shadowdef_core::data::PartitionSpec;
use shadowdef_core::defenses::DefenseConfig;
use shadowdef_core::models::task::TaskArch;
use shadowdef_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Image folder with one subdirectory per class (`kind = "folder"`).
    pub path: Option<PathBuf>,
    pub resolution: usize,
    pub channels: usize,
    pub classes: usize,
    /// Held-out split for generator pretraining and the reference classifier.
    pub public_size: usize,
    pub test_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            path: None,
            resolution: 16,
            channels: 1,
            classes: 2,
            public_size: 64,
            test_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16],
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub rounds: usize,
    pub local_rounds: usize,
    pub lr: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            rounds: 16,
            local_rounds: 1,
            lr: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    /// Pretrained defender generator written by `shadowdef pretrain`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            pretrain_steps: 300,
            pretrain_lr: 1e-2,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub top_fraction: f64,
    pub reference_epochs: usize,
    pub iip_k: Vec<usize>,
    pub perceptual: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            top_fraction: 0.3,
            reference_epochs: 5,
            iip_k: vec![1, 3, 5],
            perceptual: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub defense: u64,
    pub attack: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            data: seed,
            model: seed,
            defense: seed,
            attack: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label used as the method name in reports; defaults to the defense kind.
    pub name: Option<String>,
    pub output: PathBuf,
    /// Rounds whose uploads are attacked; default `{1, R/4, R/2, 3R/4, R}`.
    /// Attack seeds are taken from `seeds.attack`.
    pub attack_rounds: Option<Vec<usize>>,
    /// Rounds entering the aggregate metric tables; default: all attack rounds.
    pub metric_rounds: Option<Vec<usize>>,
    pub dataset: DatasetConfig,
    pub partition: PartitionSpec,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub generator: GeneratorConfig,
    pub defense: DefenseConfig,
    pub attacks: Vec<AttackConfig>,
    pub metrics: MetricsConfig,
    pub seeds: Seeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            output: PathBuf::from("runs/default"),
            attack_rounds: None,
            metric_rounds: None,
            dataset: DatasetConfig::default(),
            partition: PartitionSpec::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            generator: GeneratorConfig::default(),
            defense: DefenseConfig::None,
            attacks: Vec::new(),
            metrics: MetricsConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

/// `{1, R/4, R/2, 3R/4, R}` with integer division, deduplicated.
pub fn default_attack_rounds(rounds: usize) -> Vec<usize> {
    let mut r: Vec<usize> = [1, rounds / 4, rounds / 2, 3 * rounds / 4, rounds]
        .into_iter()
        .filter(|&r| r >= 1)
        .collect();
    r.sort_unstable();
    r.dedup();
    r
}

fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn method(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.defense.name().to_string())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds::all(seed);
        self
    }

    pub fn arch(&self) -> TaskArch {
        let mut a = TaskArch::new(self.dataset.channels, self.dataset.resolution, self.dataset.classes);
        a.widths = self.model.widths.clone();
        a.kernel = self.model.kernel;
        a
    }

    /// Copy with every optional field filled in.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let rounds = c
            .attack_rounds
            .get_or_insert_with(|| default_attack_rounds(self.training.rounds))
            .clone();
        c.metric_rounds.get_or_insert(rounds);
        c.name = Some(self.method());
        for a in &mut c.attacks {
            a.seed = c.seeds.attack;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        if t.rounds == 0 {
            return Err(Error::Config("training.rounds must be at least 1".into()));
        }
        if t.local_rounds == 0 || !(t.lr > 0.0) {
            return Err(Error::Config("training needs local_rounds >= 1 and lr > 0".into()));
        }
        let d = &self.dataset;
        if d.kind == DatasetKind::Folder && d.path.is_none() {
            return Err(Error::Config("dataset.kind = \"folder\" needs dataset.path".into()));
        }
        if !matches!(d.channels, 1 | 3) {
            return Err(Error::Config(format!("dataset.channels must be 1 or 3, got {}", d.channels)));
        }
        if d.public_size == 0 || d.test_size == 0 {
            return Err(Error::Config("public_size and test_size must be positive".into()));
        }
        self.arch().validate()?;
        self.partition.validate(usize::MAX)?;
        self.defense.validate()?;
        for a in &self.attacks {
            a.validate()?;
        }
        let r = self.resolved();
        for (what, set) in [("attack_rounds", &r.attack_rounds), ("metric_rounds", &r.metric_rounds)] {
            if let Some(bad) = set.iter().flatten().find(|&&x| x == 0 || x > t.rounds) {
                return Err(Error::Config(format!("{what} entry {bad} outside 1..={}", t.rounds)));
            }
        }
        let m = &self.metrics;
        if !(m.top_fraction > 0.0 && m.top_fraction <= 1.0) {
            return Err(Error::Config("metrics.top_fraction must lie in (0, 1]".into()));
        }
        if m.iip_k.iter().any(|&k| k == 0 || k > self.partition.total()) {
            return Err(Error::Config(format!(
                "metrics.iip_k entries must lie in 1..={}",
                self.partition.total()
            )));
        }
        Ok(())
    }

    /// Canonical TOML of the resolved configuration.
    pub fn canonical(&self) -> Result<String> {
        to_toml(&self.resolved())
    }

    /// Hash of everything that influences results (the output path excluded).
    pub fn hash(&self) -> Result<String> {
        let mut r = self.resolved();
        r.output = PathBuf::new();
        Ok(sha256_hex(&to_toml(&r)?))
    }

    /// Per-section hashes, so paired runs can be shown to differ only where intended.
    pub fn section_hashes(&self) -> Result<BTreeMap<String, String>> {
        #[derive(Serialize)]
        struct Wrap<'a, T: Serialize> {
            v: &'a T,
        }
        fn h<T: Serialize>(v: &T) -> Result<String> {
            Ok(sha256_hex(&to_toml(&Wrap { v })?))
        }
        let r = self.resolved();
        let mut out = BTreeMap::new();
        out.insert("dataset".into(), h(&r.dataset)?);
        out.insert("partition".into(), h(&r.partition)?);
        out.insert("model".into(), h(&r.model)?);
        out.insert("training".into(), h(&r.training)?);
        out.insert("generator".into(), h(&r.generator)?);
        out.insert("defense".into(), h(&r.defense)?);
        out.insert("attacks".into(), h(&r.attacks)?);
        out.insert("rounds".into(), h(&(&r.attack_rounds, &r.metric_rounds))?);
        out.insert("metrics".into(), h(&r.metrics)?);
        out.insert("seeds".into(), h(&r.seeds)?);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use shadowdef_core::shadow::ShadowConfig;

    #[test]
    fn default_rounds_scale_with_horizon() {
        assert_eq!(default_attack_rounds(100), vec![1, 25, 50, 75, 100]);
        assert_eq!(default_attack_rounds(16), vec![1, 4, 8, 12, 16]);
        assert_eq!(default_attack_rounds(2), vec![1, 2]);
        assert_eq!(default_attack_rounds(1), vec![1]);
    }

    #[test]
    fn canonical_form_round_trips() {
        let mut c = ExperimentConfig {
            defense: DefenseConfig::Shadow(ShadowConfig::default()),
            attacks: vec![AttackConfig::default(), AttackConfig::model_based()],
            ..Default::default()
        };
        c.dataset.path = Some("data".into());
        let text = c.canonical().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c.resolved());
        assert_eq!(back.canonical().unwrap(), text);
    }

    #[test]
    fn partial_documents_take_defaults() {
        let c = ExperimentConfig::from_toml_str(
            "output = \"x\"\n[training]\nrounds = 4\n[defense]\nkind = \"sparsify\"\n[[attacks]]\nkind = \"optimization\"\niterations = 10\n",
        )
        .unwrap();
        assert_eq!(c.training.lr, 0.05);
        assert_eq!(c.defense, DefenseConfig::Sparsify { keep_ratio: 0.4 });
        assert_eq!(c.attacks[0].restarts, 3);
        assert_eq!(c.resolved().attack_rounds, Some(vec![1, 2, 3, 4]));
        c.validate().unwrap();
    }

    #[test]
    fn invalid_documents_are_config_errors() {
        for text in [
            "bogus = 1",
            "[training]\nrounds = 0",
            "[defense]\nkind = \"nope\"",
            "attack_rounds = [0]",
            "[defense]\nkind = \"soteria\"",
        ] {
            let r = ExperimentConfig::from_toml_str(text).and_then(|c| c.validate());
            assert!(matches!(r, Err(Error::Config(_)) | Err(Error::NotImplemented(_))), "{text}: {r:?}");
        }
        let err = ExperimentConfig::load(Path::new("missing.file")).unwrap_err();
        assert!(err.to_string().contains("missing.file"));
    }

    #[test]
    fn paired_configs_differ_only_in_defense() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            defense: DefenseConfig::Shadow(ShadowConfig::default()),
            name: Some("none".into()),
            ..Default::default()
        };
        let (ha, hb) = (a.section_hashes().unwrap(), b.section_hashes().unwrap());
        let differing: Vec<_> = ha.keys().filter(|k| ha[*k] != hb[*k]).collect();
        assert_eq!(differing, vec!["defense"]);
        let moved = ExperimentConfig {
            output: "elsewhere".into(),
            ..Default::default()
        };
        assert_eq!(a.hash().unwrap(), moved.hash().unwrap());
    }
}
