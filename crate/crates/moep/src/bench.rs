//! Single-threaded inference throughput of the four model variants.

use std::time::Instant;

use moep_core::data::{Batch, DataSource, EvalSet, TaskSpec};
use moep_core::model::Model;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    MoeAllExperts,
    MaskedSingleExpert,
    CollapsedDense,
    DensePretrained,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::MoeAllExperts,
        Variant::MaskedSingleExpert,
        Variant::CollapsedDense,
        Variant::DensePretrained,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::MoeAllExperts => "moe-all-experts",
            Variant::MaskedSingleExpert => "masked-single-expert",
            Variant::CollapsedDense => "collapsed-dense",
            Variant::DensePretrained => "dense-pretrained",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub tokens_per_sec: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub mean_secs: f64,
    pub std_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub results: Vec<VariantResult>,
    /// collapsed-dense / moe-all-experts
    pub pruned_over_moe: f64,
    /// collapsed-dense / dense-pretrained
    pub pruned_over_dense: f64,
    /// collapsed-dense / masked-single-expert
    pub collapsed_over_masked: f64,
}

impl BenchReport {
    pub fn get(&self, v: Variant) -> &VariantResult {
        self.results.iter().find(|r| r.variant == v).expect("every variant is measured")
    }
}

/// The four models under test.
#[derive(Debug, Clone)]
pub struct Variants {
    pub moe_all: Model,
    pub masked: Model,
    pub collapsed: Model,
    pub dense: Model,
}

impl Variants {
    /// `pruned` is an MoE model with one survivor per layer, `moe` any model
    /// of the same architecture (all experts get re-enabled), `dense` a dense
    /// model of the same width.
    pub fn new(moe: &Model, pruned: &Model, dense: &Model) -> Result<Self> {
        if moe.num_moe_layers() == 0 || !moe.config().same_architecture(pruned.config()) {
            return Err(Error::Config("moe and pruned variants must share one MoE architecture".into()));
        }
        if pruned.moe_layers().any(|l| l.num_active() != 1) {
            return Err(Error::Config("pruned variant needs exactly one active expert per MoE layer".into()));
        }
        if dense.num_moe_layers() != 0 || dense.config().hidden_size != moe.config().hidden_size {
            return Err(Error::Config("dense variant must be a dense model of the same width".into()));
        }
        let mut moe_all = moe.clone();
        for layer in 0..moe_all.num_moe_layers() {
            let e = moe_all.config().num_experts;
            moe_all.set_active(layer, &vec![true; e])?;
        }
        Ok(Self {
            collapsed: pruned.collapse()?,
            masked: pruned.clone(),
            moe_all,
            dense: dense.clone(),
        })
    }

    fn model(&self, v: Variant) -> &Model {
        match v {
            Variant::MoeAllExperts => &self.moe_all,
            Variant::MaskedSingleExpert => &self.masked,
            Variant::CollapsedDense => &self.collapsed,
            Variant::DensePretrained => &self.dense,
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Times forward passes on pre-generated batches. Variants are measured
/// round-robin so slow drift of the machine affects all of them alike.
pub fn bench_inference(variants: &Variants, task: &TaskSpec, batch_size: usize, warmup: usize, repetitions: usize) -> Result<BenchReport> {
    if repetitions < 30 || warmup < 5 {
        return Err(Error::Config("bench needs >= 30 repetitions after >= 5 warmup runs".into()));
    }
    let batches: Vec<Batch> = EvalSet::generate(task, DataSource::Pretrain, 0xBE7C, 4, batch_size)?.batches;
    let seq_len = task.config().tokens_per_sequence;
    for (i, v) in Variant::ALL.iter().enumerate() {
        for w in 0..warmup {
            std::hint::black_box(variants.model(*v).predict(&batches[(i + w) % batches.len()].features)?);
        }
    }
    let mut times = vec![Vec::with_capacity(repetitions); Variant::ALL.len()];
    for rep in 0..repetitions {
        let features = &batches[rep % batches.len()].features;
        for (i, v) in Variant::ALL.iter().enumerate() {
            let model = variants.model(*v);
            let start = Instant::now();
            std::hint::black_box(model.predict(std::hint::black_box(features))?);
            times[i].push(start.elapsed().as_secs_f64());
        }
    }
    let results: Vec<VariantResult> = Variant::ALL
        .iter()
        .zip(&times)
        .map(|(&variant, t)| {
            let (mean_secs, std_secs) = mean_std(t);
            let total: f64 = t.iter().sum();
            VariantResult {
                variant,
                tokens_per_sec: (batch_size * seq_len * repetitions) as f64 / total,
                batch_size,
                seq_len,
                repetitions,
                warmup,
                mean_secs,
                std_secs,
            }
        })
        .collect();
    let tps = |v: Variant| results.iter().find(|r| r.variant == v).map_or(f64::NAN, |r| r.tokens_per_sec);
    Ok(BenchReport {
        pruned_over_moe: tps(Variant::CollapsedDense) / tps(Variant::MoeAllExperts),
        pruned_over_dense: tps(Variant::CollapsedDense) / tps(Variant::DensePretrained),
        collapsed_over_masked: tps(Variant::CollapsedDense) / tps(Variant::MaskedSingleExpert),
        results,
    })
}
