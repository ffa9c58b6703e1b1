//! Run directories: pre-training, fine-tuning settings, resumption, sweeps.
//!
//! A run directory holds `config.toml` (the exact config), `run.json`
//! (labels and summary), `metrics.csv`, `events.ndjson` and
//! `checkpoint.moep`. Two-pass runs keep the selection pass in `pass1/`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use moep_core::data::{held_out_seed, DataSource, EvalSet, TaskSpec};
use moep_core::model::Model;
use moep_core::prune::{Criterion, PruneMode};
use moep_core::train::{
    evaluate, finetune_eval_set, finetuner, pretrainer, EvalResult, FinetuneConfig, Setting, Trainer,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics;

pub const CHECKPOINT: &str = "checkpoint.moep";
pub const METRICS: &str = "metrics.csv";
pub const EVENTS: &str = "events.ndjson";
pub const RUN_INFO: &str = "run.json";
pub const CONFIG: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    /// `pretrain`, a setting name, or `pass1`.
    pub kind: String,
    pub seed: u64,
    pub subtask: Option<usize>,
    pub mode: String,
    pub criterion: Criterion,
    pub beta: f64,
    pub gamma: f64,
    pub total_steps: u64,
    pub num_experts: usize,
    pub completed_steps: u64,
    pub accuracy: Option<f64>,
    pub eval_loss: Option<f64>,
    pub train_secs: f64,
    pub eval_secs: f64,
    /// Surviving experts per MoE layer at the end of the run.
    pub survivors: Vec<Vec<usize>>,
}

impl RunInfo {
    fn new(kind: &str, t: &Trainer, subtask: Option<usize>) -> Self {
        Self {
            kind: kind.to_string(),
            seed: 0,
            subtask,
            mode: t.prune.mode.as_str().to_string(),
            criterion: t.prune.criterion,
            beta: t.prune.beta,
            gamma: t.prune.gamma,
            total_steps: t.prune.total_steps,
            num_experts: t.prune.num_experts,
            completed_steps: t.step,
            accuracy: None,
            eval_loss: None,
            train_secs: 0.0,
            eval_secs: 0.0,
            survivors: t.schedule.layers.iter().map(|l| l.survivor_ids()).collect(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_INFO);
        let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_INFO);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(&path, e.to_string()))?;
        fs::write(&path, text).map_err(Error::io(path))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

/// Persists a trainer's new metrics, events, checkpoint and info.
fn persist(dir: &Path, t: &Trainer, info: &RunInfo, append: bool, events_from: usize) -> Result<()> {
    metrics::write_csv(&dir.join(METRICS), &metrics::rows(&t.metrics), append)?;
    metrics::write_events(&dir.join(EVENTS), &t.schedule.events[events_from..], append)?;
    Checkpoint::from_trainer(t).save(&dir.join(CHECKPOINT))?;
    info.save(dir)
}

fn finish(t: &mut Trainer, eval: &EvalSet, info: &mut RunInfo, started: Instant) -> Result<EvalResult> {
    info.train_secs += started.elapsed().as_secs_f64();
    let e0 = Instant::now();
    let r = evaluate(&t.model, eval)?;
    info.eval_secs += e0.elapsed().as_secs_f64();
    t.metrics.evals.push((t.step, r));
    info.accuracy = Some(r.accuracy);
    info.eval_loss = Some(r.loss);
    info.completed_steps = t.step;
    info.survivors = t.schedule.layers.iter().map(|l| l.survivor_ids()).collect();
    Ok(r)
}

/// Pre-trains on the subtask mixture; `dense` swaps every MoE block for a
/// dense FFN. Returns the checkpoint path.
pub fn pretrain(config: &RunConfig, dense: bool, dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    create_dir(dir)?;
    config.write_into(dir)?;
    let model_config = if dense {
        config.model.dense_counterpart()
    } else {
        config.model.clone()
    };
    let task = TaskSpec::new(config.task.clone())?;
    let mut t = pretrainer(model_config, task.clone(), &config.pretrain, config.pretrain_seed)?;
    let mut info = RunInfo::new("pretrain", &t, None);
    info.seed = config.pretrain_seed;
    let started = Instant::now();
    t.run()?;
    let eval = EvalSet::generate(
        &task,
        DataSource::Pretrain,
        held_out_seed(config.pretrain_seed),
        config.finetune.eval_batches,
        config.pretrain.batch_size,
    )?;
    finish(&mut t, &eval, &mut info, started)?;
    persist(dir, &t, &info, false, 0)?;
    Ok(dir.join(CHECKPOINT))
}

/// Loads the model stored in a pre-training checkpoint.
pub fn load_pretrained(path: &Path) -> Result<(Model, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    Ok((ckpt.to_model()?, ckpt))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub setting: Setting,
    pub seed: u64,
    pub dir: PathBuf,
    pub accuracy: f64,
}

/// Options that stop a run early (for later `resume`).
#[derive(Debug, Clone, Copy, Default)]
pub struct StopAt(pub Option<u64>);

fn run_pass(
    dir: &Path,
    kind: &str,
    mut t: Trainer,
    finetune: &FinetuneConfig,
    seed: u64,
    stop: StopAt,
) -> Result<(Trainer, RunInfo)> {
    create_dir(dir)?;
    let mut info = RunInfo::new(kind, &t, Some(finetune.subtask));
    info.seed = seed;
    let started = Instant::now();
    match stop.0 {
        Some(s) if s < t.total_steps() => {
            t.run_until(s)?;
            info.train_secs = started.elapsed().as_secs_f64();
            info.completed_steps = t.step;
            persist(dir, &t, &info, false, 0)?;
            return Ok((t, info));
        }
        _ => t.run()?,
    }
    let eval = finetune_eval_set(&t.task, finetune, seed)?;
    finish(&mut t, &eval, &mut info, started)?;
    persist(dir, &t, &info, false, 0)?;
    Ok((t, info))
}

/// One fine-tuning setting for one seed, written to `dir`.
pub fn finetune_one(
    config: &RunConfig,
    pretrained: &Model,
    setting: Setting,
    seed: u64,
    dir: &Path,
    stop: StopAt,
) -> Result<RunSummary> {
    let dense = pretrained.num_moe_layers() == 0 || pretrained.config().num_experts == 1;
    if setting == Setting::DenseFt && !dense {
        return Err(Error::Config("dense-ft needs a dense (or single-expert) checkpoint".into()));
    }
    if setting != Setting::DenseFt && pretrained.num_moe_layers() == 0 {
        return Err(Error::Config(format!("{} needs an MoE checkpoint", setting.as_str())));
    }
    create_dir(dir)?;
    config.write_into(dir)?;
    let task = TaskSpec::new(config.task.clone())?;
    let ft = &config.finetune;
    let (_, info) = if setting.is_two_pass() {
        let first = finetuner(pretrained, &task, ft, setting.mode(), seed)?;
        let (first, _) = run_pass(&dir.join("pass1"), "pass1", first, ft, seed, StopAt(None))?;
        let mut restricted = pretrained.clone();
        for (layer, mask) in first.schedule.masks().iter().enumerate() {
            restricted.set_active(layer, mask)?;
        }
        let second = finetuner(&restricted, &task, ft, PruneMode::None, seed)?;
        run_pass(dir, setting.as_str(), second, ft, seed, stop)?
    } else {
        let t = finetuner(pretrained, &task, ft, setting.mode(), seed)?;
        run_pass(dir, setting.as_str(), t, ft, seed, stop)?
    };
    Ok(RunSummary {
        setting,
        seed,
        dir: dir.to_path_buf(),
        accuracy: info.accuracy.unwrap_or(f64::NAN),
    })
}

/// Continues an interrupted run directory to the end of its schedule.
pub fn resume(dir: &Path) -> Result<RunSummary> {
    let mut info = RunInfo::load(dir)?;
    let setting = Setting::parse(&info.kind)
        .ok_or_else(|| Error::Config(format!("{}: run kind {:?} cannot be resumed", dir.display(), info.kind)))?;
    let config = RunConfig::load(&dir.join(CONFIG))?;
    let mut t = Checkpoint::load(&dir.join(CHECKPOINT))?.to_trainer()?;
    let events_before = t.schedule.events.len();
    if t.is_done() {
        return Err(Error::Config(format!("{}: run already finished", dir.display())));
    }
    let started = Instant::now();
    t.run()?;
    let eval = finetune_eval_set(&t.task, &config.finetune, info.seed)?;
    finish(&mut t, &eval, &mut info, started)?;
    persist(dir, &t, &info, true, events_before)?;
    Ok(RunSummary {
        setting,
        seed: info.seed,
        dir: dir.to_path_buf(),
        accuracy: info.accuracy.unwrap_or(f64::NAN),
    })
}

/// Runs `setting` for every seed in the config, in parallel.
pub fn finetune_seeds(config: &RunConfig, pretrained: &Model, setting: Setting, root: &Path) -> Result<Vec<RunSummary>> {
    config
        .seeds
        .par_iter()
        .map(|&seed| {
            let dir = root.join(setting.as_str()).join(format!("seed-{seed}"));
            finetune_one(config, pretrained, setting, seed, &dir, StopAt(None))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Beta,
    Gamma,
    Lr,
    Steps,
    PoolBatches,
}

impl SweepParam {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "beta" => Self::Beta,
            "gamma" => Self::Gamma,
            "lr" => Self::Lr,
            "steps" => Self::Steps,
            "pool_batches" | "pool-batches" => Self::PoolBatches,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Beta => "beta",
            Self::Gamma => "gamma",
            Self::Lr => "lr",
            Self::Steps => "steps",
            Self::PoolBatches => "pool_batches",
        }
    }

    pub fn apply(self, config: &mut RunConfig, value: f64) -> Result<()> {
        let ft = &mut config.finetune;
        let whole = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as u64)
            } else {
                Err(Error::Config(format!("{} needs a positive integer, got {value}", self.as_str())))
            }
        };
        match self {
            Self::Beta => ft.beta = value,
            Self::Gamma => ft.gamma = value,
            Self::Lr => ft.train.optimizer.lr = value,
            Self::Steps => ft.train.steps = whole()?,
            Self::PoolBatches => ft.train.pool_batches = Some(whole()? as usize),
        }
        config.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub runs: Vec<RunSummary>,
}

/// Every (value, seed) pair becomes one run under `root/<param>=<value>/`.
pub fn sweep(config: &RunConfig, pretrained: &Model, setting: Setting, param: SweepParam, values: &[f64], root: &Path) -> Result<Vec<SweepPoint>> {
    let configs = values
        .iter()
        .map(|&v| {
            let mut c = config.clone();
            param.apply(&mut c, v)?;
            Ok((v, c))
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, u64)> = (0..values.len())
        .flat_map(|i| config.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let done = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let (v, c) = &configs[i];
            let dir = root
                .join(format!("{}={v}", param.as_str()))
                .join(setting.as_str())
                .join(format!("seed-{seed}"));
            finetune_one(c, pretrained, setting, seed, &dir, StopAt(None)).map(|r| (i, r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(configs
        .iter()
        .enumerate()
        .map(|(i, (v, _))| SweepPoint {
            value: *v,
            runs: done.iter().filter(|(j, _)| *j == i).map(|(_, r)| r.clone()).collect(),
        })
        .collect())
}
