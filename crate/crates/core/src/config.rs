//! Run configuration, stored as TOML (`key = value` lines grouped in
//! sections). Every field has a default so partial files are valid.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{MetaConfig, PretrainConfig};
use crate::model::ModelConfig;
use crate::synth::SceneConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Pretrain,
    Finetune,
    Meta,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Pretrain, Condition::Finetune, Condition::Meta];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Pretrain => "pretrain",
            Condition::Finetune => "finetune",
            Condition::Meta => "meta",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Condition::Pretrain => "Pre-train",
            Condition::Finetune => "Fine-tune",
            Condition::Meta => "Meta",
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Condition::Pretrain),
            "finetune" => Ok(Condition::Finetune),
            "meta" => Ok(Condition::Meta),
            _ => Err(Error::Config(format!("unknown condition `{s}` (pretrain | finetune | meta)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_train_rooms: usize,
    pub n_test_rooms: usize,
    pub clips_per_room: usize,
    pub dataset_seed: u64,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train_rooms: 9,
            n_test_rooms: 7,
            clips_per_room: 20,
            dataset_seed: 0,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub condition: Condition,
    pub dataset_dir: PathBuf,
    pub features_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Threads for per-task work; 1 keeps everything serial.
    pub workers: usize,
    /// Optional pre-trained checkpoint for the fine-tune condition.
    pub pretrained: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub meta: MetaConfig,
    pub pretrain: PretrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            condition: Condition::Meta,
            dataset_dir: PathBuf::from("data"),
            features_dir: PathBuf::from("features"),
            out_dir: PathBuf::from("runs"),
            workers: 1,
            pretrained: None,
            checkpoint_every: 10,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            meta: MetaConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        self.model.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.dataset.clips_per_room == 0 {
            return Err(Error::Config("clips_per_room must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// Read any defaulted TOML section type; `None` gives the defaults.
pub fn load_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}
