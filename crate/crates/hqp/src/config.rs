//! Run configuration: a TOML file plus `key.path=value` overrides.
//!
//! Every key is optional except `seed`. Sections mirror the library
//! configuration types:
//!
//! ```toml
//! seed = 0
//! epochs = 12
//! batch_size = 8
//! dn_mode = "cascade"        # cascade | uniform | off
//! noise_level = 0.0          # pseudo-label corruption of the training split
//! sam_refine = false
//! snap_threshold = 0.9
//!
//! [data]                     # omitted paths are generated from [gen]
//! train_path = "train.jsonl"
//! eval_path = "eval.jsonl"
//! proposals_path = "props.csv"
//! n_train = 2000
//! n_eval = 500
//!
//! [gen]        # GenConfig
//! [emulator]   # EmulatorConfig
//! [model]      # ModelConfig, including query_init = "hqp" | "random"
//! [dn]         # DnConfig
//! [cascade]    # CascadeConfig
//! [loss]       # ObjectiveConfig
//! [optim]      # AdamWConfig
//! ```

use std::path::{Path, PathBuf};

use hqp_core::cascade::CascadeConfig;
use hqp_core::data::GenConfig;
use hqp_core::losses::ObjectiveConfig;
use hqp_core::model::ModelConfig;
use hqp_core::optim::AdamWConfig;
use hqp_core::proposals::EmulatorConfig;
use hqp_core::queries::DnConfig;
use hqp_core::trainer::{DnMode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    /// Proposal fixture replacing the emulator for every scene it covers.
    pub proposals_path: Option<PathBuf>,
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_path: None,
            eval_path: None,
            proposals_path: None,
            n_train: 2000,
            n_eval: 500,
        }
    }
}

fn default_epochs() -> usize {
    TrainConfig::default().epochs
}

fn default_batch() -> usize {
    TrainConfig::default().batch_size
}

fn default_dn_mode() -> DnMode {
    DnMode::Cascade
}

fn default_snap() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_dn_mode")]
    pub dn_mode: DnMode,
    #[serde(default)]
    pub noise_level: f64,
    #[serde(default)]
    pub sam_refine: bool,
    #[serde(default = "default_snap")]
    pub snap_threshold: f64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub gen: GenConfig,
    #[serde(default)]
    pub emulator: EmulatorConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub dn: DnConfig,
    #[serde(default)]
    pub cascade: CascadeConfig,
    #[serde(default)]
    pub loss: ObjectiveConfig,
    #[serde(default)]
    pub optim: AdamWConfig,
}

impl RunConfig {
    /// Library defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        let t = TrainConfig::default();
        Self {
            seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            dn_mode: t.dn_mode,
            noise_level: 0.0,
            sam_refine: false,
            snap_threshold: default_snap(),
            data: DataConfig::default(),
            gen: GenConfig::default(),
            emulator: EmulatorConfig::default(),
            model: t.model,
            dn: t.dn,
            cascade: t.cascade,
            loss: t.objective,
            optim: t.optim,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            dn: self.dn,
            dn_mode: self.dn_mode,
            cascade: self.cascade,
            objective: self.loss.clone(),
            optim: self.optim,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.gen.validate()?;
        self.emulator.validate()?;
        if self.model.image_size != self.gen.image_size || self.model.n_classes != self.gen.n_classes {
            return Err(Error::Config("model and generator disagree on image size or class count".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Config("noise_level must lie in [0, 1]".into()));
        }
        if !(self.snap_threshold > 0.0 && self.snap_threshold < 1.0) {
            return Err(Error::Config("snap_threshold must lie in (0, 1)".into()));
        }
        for p in [&self.data.train_path, &self.data.eval_path, &self.data.proposals_path]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if self.data.train_path.is_none() && self.data.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        Ok(())
    }

    /// The configuration with everything that does not affect training
    /// (epoch budget, evaluation switches) reset, for comparing runs.
    pub fn training_view(&self) -> RunConfig {
        RunConfig {
            epochs: 0,
            sam_refine: false,
            snap_threshold: default_snap(),
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        crate::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Parses TOML text, applies `key.path=value` overrides, then validates.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    /// Loads `path` (or starts from an empty file) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(io_err(p))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }
}

/// Sets `a.b.c = value` in `root`; the value is read as TOML and falls back
/// to a plain string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        assert!(RunConfig::from_toml_with("epochs = 3", &[]).is_err());
        assert_eq!(RunConfig::from_toml_with("seed = 4", &[]).unwrap().seed, 4);
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::with_seed(9);
        let back = RunConfig::from_toml_with(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        back.validate().unwrap();
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = RunConfig::from_toml_with(
            "seed = 1\n[optim]\nlr = 0.5\n",
            &[
                "optim.lr=0.002".into(),
                "cascade.tau = 0.3".into(),
                "dn_mode=uniform".into(),
                "model.query_init=random".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.optim.lr, 0.002);
        assert_eq!(cfg.cascade.tau, 0.3);
        assert_eq!(cfg.dn_mode, DnMode::Uniform);
        assert_eq!(cfg.model.query_init, hqp_core::model::QueryInit::Random);
    }

    #[test]
    fn unknown_keys_and_missing_files_are_errors() {
        assert!(RunConfig::from_toml_with("seed = 1\nbogus = 2", &[]).is_err());
        let mut cfg = RunConfig::with_seed(0);
        cfg.data.train_path = Some("/nonexistent/train.jsonl".into());
        assert!(cfg.validate().is_err());
    }
}
