//! Run configuration as TOML. Unknown keys are rejected everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use moep_core::data::TaskConfig;
use moep_core::model::ModelConfig;
use moep_core::optim::AdamConfig;
use moep_core::train::{FinetuneConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OUT_DIR_ENV: &str = "MOEP_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            warmup: 5,
            repetitions: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for parameter init and pre-training data.
    pub pretrain_seed: u64,
    /// Fine-tuning seeds; results are aggregated over them.
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pretrain_seed: 1,
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: None,
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            pretrain: TrainConfig::pretrain_default(),
            finetune: default_finetune(),
            bench: BenchConfig::default(),
        }
    }
}

/// Fine-tuning defaults: 800 steps over a fixed pool of 16 batches (512
/// sequences, so the downstream set is small next to pre-training), no
/// auxiliary loss.
pub fn default_finetune() -> FinetuneConfig {
    FinetuneConfig {
        train: TrainConfig {
            steps: 800,
            batch_size: 32,
            pool_batches: Some(16),
            optimizer: AdamConfig::default(),
        },
        eval_batches: 64,
        balance_loss_weight: Some(0.0),
        ..FinetuneConfig::default()
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.train.validate()?;
        if self.task.feature_dim != self.model.input_dim {
            return Err(Error::Config(format!(
                "task.feature_dim {} differs from model.input_dim {}",
                self.task.feature_dim, self.model.input_dim
            )));
        }
        if self.task.classes_per_subtask != self.model.num_classes {
            return Err(Error::Config(format!(
                "task.classes_per_subtask {} differs from model.num_classes {}",
                self.task.classes_per_subtask, self.model.num_classes
            )));
        }
        if self.finetune.subtask >= self.task.num_subtasks {
            return Err(Error::Config(format!(
                "finetune.subtask {} out of range for {} subtasks",
                self.finetune.subtask, self.task.num_subtasks
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.bench.repetitions < 30 || self.bench.warmup < 5 || self.bench.batch_size == 0 {
            return Err(Error::Config("bench needs >= 30 repetitions, >= 5 warmup runs and batch_size >= 1".into()));
        }
        Ok(())
    }

    /// Parses `text` layered over [`RunConfig::default`]: a partial table
    /// keeps the run defaults for every key it does not set.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        let config: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Writes the exact config into a run directory.
    pub fn write_into(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()?).map_err(Error::io(path))
    }

    /// `out_dir`, else `$MOEP_OUT_DIR`, else `./runs`.
    pub fn output_root(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
