//! Experiment configuration and run identity.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 (first 16 digits) of the canonical JSON form of `value`.
///
/// Object keys are sorted, so two values that serialize to equal JSON trees
/// hash identically regardless of field order.
pub fn canonical_hash<S: Serialize + ?Sized>(value: &S) -> String {
    let tree = serde_json::to_value(value).expect("configuration types serialize to JSON");
    let text = serde_json::to_string(&tree).expect("JSON values serialize");
    hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
}

/// Identity stamped into every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct Provenance {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            version: crate::VERSION.to_string(),
            config_hash: config_hash.into(),
            seed,
        }
    }
}

/// Everything that defines a run: data, architecture, training and
/// protocol settings. Read from TOML; command-line flags are merged in
/// before hashing.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Dataset directory written by `scenegen` and read by the trainers.
    pub data_dir: std::path::PathBuf,
    /// Run directory holding checkpoints, logs and reports.
    pub out_dir: std::path::PathBuf,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Label fractions of the annotation sweep (0 = zero-shot row).
    pub fractions: Vec<f64>,
    /// Label fraction of the `finetune` protocol and the UDAKD ablation.
    pub finetune_fraction: f64,
    /// Initialise fine-tuning from the UDAKD checkpoint (else random).
    pub finetune_from_udakd: bool,
    pub scene: crate::scenegen::SceneSpec,
    pub model: crate::models::ModelConfig,
    pub distill: crate::distill::DistillConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: "data".into(),
            out_dir: "runs/default".into(),
            train_scenes: 64,
            val_scenes: 16,
            fractions: vec![0.0, 0.1, 0.25, 0.5, 1.0],
            finetune_fraction: 0.1,
            finetune_from_udakd: true,
            scene: Default::default(),
            model: Default::default(),
            distill: Default::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text, applies `key.path=value` overrides, and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> crate::Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| crate::Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| crate::Error::Config(e.to_string()))?;
        cfg.distill.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path, overrides: &[String]) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> crate::Result<String> {
        toml::to_string(self).map_err(|e| crate::Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> crate::Result<()> {
        crate::error::ensure!(self.train_scenes > 0, Config, "train_scenes must be positive");
        crate::error::ensure!(self.val_scenes > 0, Config, "val_scenes must be positive");
        crate::error::ensure!(
            self.fractions.iter().all(|f| (0.0..=1.0).contains(f)),
            Config,
            "fractions must lie in [0, 1]"
        );
        crate::error::ensure!(
            self.finetune_fraction > 0.0 && self.finetune_fraction <= 1.0,
            Config,
            "finetune_fraction must lie in (0, 1]"
        );
        crate::error::ensure!(self.distill.seed == self.seed, Config, "distill.seed must equal seed");
        self.scene.validate()?;
        self.model.validate()?;
        self.distill.validate()
    }

    /// Hash identifying the run; output and data locations do not count.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.data_dir = Default::default();
        c.out_dir = Default::default();
        canonical_hash(&c)
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(self.hash(), self.seed)
    }
}

/// Sets `a.b.c = value` in a TOML table. The value is read as a TOML
/// literal when possible and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> crate::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| crate::Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| crate::Error::Config(format!("{p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
