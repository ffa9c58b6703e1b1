//! Training loop, evaluation and the fine-tuning settings.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{held_out_seed, DataSource, DataStream, EvalSet, TaskSpec};
use crate::error::{Divergence, Error, Result};
use crate::graph::Graph;
use crate::model::{Model, ModelConfig};
use crate::optim::{learning_rate, Adam, AdamConfig};
use crate::prune::{on_window_end, Criterion, DecisionKind, Ledger, PruneConfig, PruneMode, ScheduleState, WindowRecord};
use crate::tensor::argmax;

const DATA_SEED_MIX: u64 = 0xD1B5_4A32_D192_ED03;

/// Seed of the training data stream for a run seed (kept apart from the
/// parameter-init stream).
pub fn data_seed(seed: u64, subtask: Option<usize>) -> u64 {
    let base = seed ^ DATA_SEED_MIX;
    match subtask {
        Some(k) => base.wrapping_add((k as u64 + 1).wrapping_mul(0x9E37_79B9)),
        None => base,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Cycle over this many fixed batches instead of drawing fresh ones.
    /// Serialized as a count, with 0 for a fresh stream, so layered config
    /// files can switch the pool off.
    #[serde(with = "pool_count")]
    pub pool_batches: Option<usize>,
    pub optimizer: AdamConfig,
}

mod pool_count {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(pool: &Option<usize>, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_u64(pool.unwrap_or(0) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> core::result::Result<Option<usize>, D::Error> {
        let n = usize::deserialize(d)?;
        Ok((n > 0).then_some(n))
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            batch_size: 32,
            pool_batches: None,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            pool_batches: None,
            optimizer: AdamConfig {
                lr: 2e-3,
                warmup_steps: 240,
                ..AdamConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Completed optimizer steps after this update (1-based).
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub steps: Vec<StepRecord>,
    pub windows: Vec<WindowRecord>,
    pub evals: Vec<(u64, EvalResult)>,
}

/// One run's mutable state: model, optimizer, data cursor and schedule.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub task: TaskSpec,
    pub stream: DataStream,
    pub optimizer: Adam,
    pub prune: PruneConfig,
    pub schedule: ScheduleState,
    pub ledger: Ledger,
    /// Completed optimizer steps; also the data cursor.
    pub step: u64,
    pub metrics: RunMetrics,
}

impl Trainer {
    /// Fresh run starting from `model`'s current masks. `prune.total_steps`
    /// is the run length.
    pub fn new(model: Model, task: TaskSpec, stream: DataStream, optimizer: AdamConfig, prune: PruneConfig) -> Result<Self> {
        prune.validate()?;
        optimizer.validate()?;
        let masks = model.active_masks();
        let experts = masks.first().map_or(prune.num_experts, Vec::len);
        if !masks.is_empty() && experts != prune.num_experts {
            return Err(Error::Config(format!(
                "prune config has {} experts, model has {experts}",
                prune.num_experts
            )));
        }
        let optimizer = Adam::new(optimizer, model.params().values());
        Ok(Self {
            schedule: ScheduleState::new(&masks)?,
            ledger: Ledger::new(masks.len(), experts),
            model,
            task,
            stream,
            optimizer,
            prune,
            step: 0,
            metrics: RunMetrics::default(),
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.prune.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.prune.total_steps
    }

    /// Forward, backward, Adam update, ledger accumulation, then the window
    /// boundary check. Dropped experts' parameters are not updated.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        if self.is_done() {
            return Err(Error::Precondition(format!("run already finished at step {}", self.step)));
        }
        let batch = self.stream.batch(&self.task, self.step)?;
        let c = &self.optimizer.config;
        let lr = learning_rate(c.lr, self.step, c.warmup_steps, self.prune.total_steps);

        let (loss, grads, gates) = {
            let params = self.model.params().values();
            let mut g = Graph::new();
            let (loss, out) = self.model.loss_with(params, &mut g, &batch)?;
            let value = g.value(loss).item();
            let grads = if value.is_finite() { Some(g.backward(loss)?) } else { None };
            match grads {
                Some(grads) if grads.is_finite() => (value, grads, out.gates),
                _ => {
                    return Err(Error::Diverged(Box::new(Divergence {
                        step: self.step,
                        loss: value,
                        ledger: self.ledger.clone(),
                    })))
                }
            }
        };

        let frozen = self.model.frozen_params();
        self.optimizer.step(self.model.params_mut().values_mut(), &grads, lr, &frozen)?;
        self.ledger.accumulate(&gates)?;
        self.step += 1;

        if self.prune.is_boundary(self.step) {
            let records = on_window_end(&mut self.schedule, &mut self.ledger, &self.prune, self.step)?;
            for (layer, mask) in self.schedule.masks().iter().enumerate() {
                if *mask != self.model.active_masks()[layer] {
                    self.model.set_active(layer, mask)?;
                }
            }
            self.metrics.windows.extend(records);
        }
        let record = StepRecord { step: self.step, loss, lr };
        self.metrics.steps.push(record);
        Ok(record)
    }

    /// Trains until `step` completed steps (or the end of the run).
    pub fn run_until(&mut self, step: u64) -> Result<()> {
        while self.step < step.min(self.prune.total_steps) {
            self.train_step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.prune.total_steps)
    }

    /// Step after which `layer` had a single survivor, if it has one.
    pub fn finalized_at(&self, layer: usize) -> Option<u64> {
        finalized_at(&self.schedule, layer)
    }
}

/// Step of the decision that left `layer` with one survivor. `Some(0)` for
/// a layer that started single.
pub fn finalized_at(schedule: &ScheduleState, layer: usize) -> Option<u64> {
    let l = schedule.layers.get(layer)?;
    if !l.finalized {
        return None;
    }
    Some(
        schedule
            .events
            .iter()
            .filter(|e| e.layer == layer && !e.dropped.is_empty())
            .map(|e| e.step)
            .max()
            .unwrap_or(0),
    )
}

/// Accuracy and mean task cross-entropy (no auxiliary loss).
pub fn evaluate(model: &Model, eval: &EvalSet) -> Result<EvalResult> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut loss_sum = 0.0;
    for batch in &eval.batches {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch.features)?;
        let ce = g.cross_entropy(out.logits, &batch.labels)?;
        loss_sum += g.value(ce).item() * batch.num_sequences() as f64;
        let logits = g.value(out.logits);
        for (s, &label) in batch.labels.iter().enumerate() {
            if argmax(logits.row(s)) == Some(label) {
                correct += 1;
            }
        }
        total += batch.num_sequences();
    }
    if total == 0 {
        return Err(Error::Precondition("empty evaluation set".into()));
    }
    Ok(EvalResult {
        accuracy: correct as f64 / total as f64,
        loss: loss_sum / total as f64,
    })
}

/// Trainer for pre-training on the subtask mixture (no pruning).
pub fn pretrainer(config: ModelConfig, task: TaskSpec, train: &TrainConfig, seed: u64) -> Result<Trainer> {
    train.validate()?;
    let experts = config.num_experts;
    let model = Model::init(config, seed)?;
    let stream = DataStream {
        source: DataSource::Pretrain,
        seed: data_seed(seed, None),
        batch_size: train.batch_size,
        pool_batches: train.pool_batches,
    };
    Trainer::new(
        model,
        task,
        stream,
        train.optimizer.clone(),
        PruneConfig::new(PruneMode::None, train.steps, experts),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    DenseFt,
    MoeFt,
    TwoPassStaged,
    TwoPassEager,
    StagedPruning,
    EagerPruning,
}

impl Setting {
    pub const ALL: [Setting; 6] = [
        Setting::DenseFt,
        Setting::MoeFt,
        Setting::TwoPassStaged,
        Setting::TwoPassEager,
        Setting::StagedPruning,
        Setting::EagerPruning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::DenseFt => "dense-ft",
            Setting::MoeFt => "moe-ft",
            Setting::TwoPassStaged => "two-pass-staged",
            Setting::TwoPassEager => "two-pass-eager",
            Setting::StagedPruning => "staged-pruning",
            Setting::EagerPruning => "eager-pruning",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = match s {
            "dense" => "dense-ft",
            "moe" => "moe-ft",
            "staged" => "staged-pruning",
            "eager" => "eager-pruning",
            other => other,
        };
        Self::ALL.into_iter().find(|x| x.as_str() == s)
    }

    /// Mode of the (first) fine-tuning pass.
    pub fn mode(self) -> PruneMode {
        match self {
            Setting::DenseFt | Setting::MoeFt => PruneMode::None,
            Setting::TwoPassStaged | Setting::StagedPruning => PruneMode::Staged,
            Setting::TwoPassEager | Setting::EagerPruning => PruneMode::Eager,
        }
    }

    pub fn is_two_pass(self) -> bool {
        matches!(self, Setting::TwoPassStaged | Setting::TwoPassEager)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub subtask: usize,
    pub train: TrainConfig,
    pub beta: f64,
    pub gamma: f64,
    pub criterion: Criterion,
    pub force_drop: bool,
    pub eval_batches: usize,
    /// Replaces the checkpoint's auxiliary loss weight while fine-tuning.
    pub balance_loss_weight: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            subtask: 0,
            train: TrainConfig::default(),
            beta: 1.0,
            gamma: 1.0,
            criterion: Criterion::Alpha,
            force_drop: true,
            eval_batches: 16,
            balance_loss_weight: None,
        }
    }
}

impl FinetuneConfig {
    pub fn prune_config(&self, mode: PruneMode, num_experts: usize) -> PruneConfig {
        PruneConfig {
            mode,
            criterion: self.criterion,
            beta: self.beta,
            gamma: self.gamma,
            total_steps: self.train.steps,
            num_experts,
            force_drop: self.force_drop,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub setting: Setting,
    pub seed: u64,
    /// The run whose model is the result (pass 2 for two-pass settings).
    pub trainer: Trainer,
    /// Selection pass of a two-pass setting.
    pub first_pass: Option<Box<Trainer>>,
    pub eval: EvalResult,
}

/// Fine-tuning trainer on one subtask, starting from `pretrained` with the
/// given masks applied.
pub fn finetuner(pretrained: &Model, task: &TaskSpec, config: &FinetuneConfig, mode: PruneMode, seed: u64) -> Result<Trainer> {
    config.train.validate()?;
    let stream = DataStream {
        source: DataSource::Finetune { subtask: config.subtask },
        seed: data_seed(seed, Some(config.subtask)),
        batch_size: config.train.batch_size,
        pool_batches: config.train.pool_batches,
    };
    let mut model = pretrained.clone();
    if let Some(w) = config.balance_loss_weight {
        model.set_balance_loss_weight(w)?;
    }
    Trainer::new(
        model,
        task.clone(),
        stream,
        config.train.optimizer.clone(),
        config.prune_config(mode, pretrained.config().num_experts),
    )
}

/// Held-out evaluation set for a fine-tuning subtask.
pub fn finetune_eval_set(task: &TaskSpec, config: &FinetuneConfig, seed: u64) -> Result<EvalSet> {
    EvalSet::generate(
        task,
        DataSource::Finetune { subtask: config.subtask },
        held_out_seed(data_seed(seed, Some(config.subtask))),
        config.eval_batches,
        config.train.batch_size,
    )
}

/// Runs one fine-tuning setting to completion and evaluates the result.
pub fn run_setting(pretrained: &Model, task: &TaskSpec, setting: Setting, config: &FinetuneConfig, seed: u64) -> Result<FinetuneRun> {
    let dense = pretrained.num_moe_layers() == 0 || pretrained.config().num_experts == 1;
    match setting {
        Setting::DenseFt if !dense => {
            return Err(Error::Config("dense-ft needs a dense (or single-expert) checkpoint".into()));
        }
        Setting::DenseFt => {}
        _ if pretrained.num_moe_layers() == 0 => {
            return Err(Error::Config(format!("{} needs an MoE checkpoint", setting.as_str())));
        }
        _ => {}
    }

    let (trainer, first_pass) = if setting.is_two_pass() {
        let mut first = finetuner(pretrained, task, config, setting.mode(), seed)?;
        first.run()?;
        let mut restricted = pretrained.clone();
        for (layer, mask) in first.schedule.masks().iter().enumerate() {
            restricted.set_active(layer, mask)?;
        }
        let mut second = finetuner(&restricted, task, config, PruneMode::None, seed)?;
        second.run()?;
        (second, Some(Box::new(first)))
    } else {
        let mut t = finetuner(pretrained, task, config, setting.mode(), seed)?;
        t.run()?;
        (t, None)
    };

    let eval_set = finetune_eval_set(task, config, seed)?;
    let eval = evaluate(&trainer.model, &eval_set)?;
    let mut trainer = trainer;
    trainer.metrics.evals.push((trainer.step, eval));
    Ok(FinetuneRun {
        setting,
        seed,
        trainer,
        first_pass,
        eval,
    })
}

/// Number of optimizer steps each layer's final expert trained alone.
pub fn solo_steps(trainer: &Trainer) -> Vec<Option<u64>> {
    (0..trainer.schedule.layers.len())
        .map(|l| trainer.finalized_at(l).map(|s| trainer.total_steps() - s))
        .collect()
}

/// Whether any event in the log was a forced decision.
pub fn used_force(schedule: &ScheduleState) -> bool {
    schedule.events.iter().any(|e| e.kind == DecisionKind::Force && !e.dropped.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskConfig;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            num_blocks: 2,
            hidden_size: 8,
            ffn_inner: 16,
            num_experts: 4,
            moe_blocks: alloc::vec![1],
            ..ModelConfig::default()
        }
    }

    fn task() -> TaskSpec {
        TaskSpec::new(TaskConfig::default()).unwrap()
    }

    fn short(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 8,
            pool_batches: None,
            optimizer: AdamConfig {
                lr: 3e-3,
                warmup_steps: 2,
                ..AdamConfig::default()
            },
        }
    }

    #[test]
    fn zero_lr_keeps_params_but_accumulates() {
        let mut cfg = short(100);
        cfg.optimizer.lr = 0.0;
        let mut t = pretrainer(tiny_model(), task(), &cfg, 1).unwrap();
        let before = t.model.params().values().to_vec();
        t.train_step().unwrap();
        assert_eq!(t.model.params().values(), before.as_slice());
        assert_eq!(t.ledger.layers()[0].token_count, 64);
    }

    #[test]
    fn runs_are_deterministic() {
        let run = || {
            let mut t = pretrainer(tiny_model(), task(), &short(20), 5).unwrap();
            t.run().unwrap();
            t.metrics.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn finished_run_rejects_steps() {
        let mut t = pretrainer(tiny_model(), task(), &short(1), 1).unwrap();
        t.run().unwrap();
        assert!(matches!(t.train_step(), Err(Error::Precondition(_))));
    }

    #[test]
    fn divergence_reports_ledger() {
        let mut cfg = short(2);
        cfg.optimizer.lr = 1e300;
        let mut t = pretrainer(tiny_model(), task(), &cfg, 1).unwrap();
        let mut err = None;
        for _ in 0..2 {
            if let Err(e) = t.train_step() {
                err = Some(e);
                break;
            }
        }
        match err {
            Some(Error::Diverged(d)) => assert_eq!(d.ledger.layers().len(), 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn dense_ft_rejects_moe() {
        let model = Model::init(tiny_model(), 0).unwrap();
        let cfg = FinetuneConfig {
            train: short(4),
            ..FinetuneConfig::default()
        };
        let r = run_setting(&model, &task(), Setting::DenseFt, &cfg, 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn eager_finalizes_by_half() {
        let model = Model::init(tiny_model(), 0).unwrap();
        let cfg = FinetuneConfig {
            train: short(40),
            eval_batches: 1,
            ..FinetuneConfig::default()
        };
        let run = run_setting(&model, &task(), Setting::EagerPruning, &cfg, 3).unwrap();
        let at = run.trainer.finalized_at(0).unwrap();
        assert!(at <= 20);
        assert_eq!(run.trainer.model.moe_layer(0).unwrap().num_active(), 1);
    }

    #[test]
    fn two_pass_restricts_from_start() {
        let model = Model::init(tiny_model(), 0).unwrap();
        let cfg = FinetuneConfig {
            train: short(16),
            eval_batches: 1,
            ..FinetuneConfig::default()
        };
        let run = run_setting(&model, &task(), Setting::TwoPassEager, &cfg, 3).unwrap();
        let first = run.first_pass.as_ref().unwrap();
        assert_eq!(run.trainer.model.active_masks(), first.schedule.masks());
        assert!(run.trainer.schedule.events.is_empty());
    }

    #[test]
    fn setting_names_round_trip() {
        for s in Setting::ALL {
            assert_eq!(Setting::parse(s.as_str()), Some(s));
        }
        assert_eq!(Setting::parse("eager"), Some(Setting::EagerPruning));
        assert_eq!(Setting::parse("nope"), None);
    }
}
