//! Acceptance criteria, run sequentially with one PASS/FAIL line each.
//!
//! Criteria 7 to 11 share one default pre-training of an MoE and a dense
//! model plus the fine-tuning runs of criterion 8; each criterion's own
//! time budget covers the work it would need on its own.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use moep::bench::{bench_inference, BenchReport, Variant, Variants};
use moep::checkpoint::Checkpoint;
use moep::config::RunConfig;
use moep::report::{self, LoadedRun};
use moep::runner::{self, StopAt, CHECKPOINT, EVENTS, METRICS};
use moep_core::data::{gen_finetune_batch, TaskConfig, TaskSpec};
use moep_core::gradcheck::grad_check;
use moep_core::graph::Graph;
use moep_core::model::{MixerKind, Model, ModelConfig};
use moep_core::moe::GateResult;
use moep_core::prune::{on_window_end, replay, threshold, Criterion, Ledger, PruneConfig, PruneMode, ScheduleState};
use moep_core::train::{finetuner, Setting, Trainer};
use moep_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

// 1
fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig {
        num_blocks: 2,
        hidden_size: 8,
        ffn_inner: 8,
        num_heads: 2,
        num_experts: 4,
        moe_blocks: vec![1],
        input_dim: 6,
        num_classes: 3,
        balance_loss_weight: 1e-2,
        mixer: MixerKind::Attention,
    };
    let model = Model::init(config, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = moep_core::data::Batch {
        features: random(&mut rng, &[4, 4, 6], 2.0),
        labels: vec![0, 2, 1, 2],
        subtasks: vec![0; 4],
    };
    let params = model.params().values().to_vec();
    let r = grad_check(&params, 1e-5, None, |g, ps| Ok(model.loss_with(ps, g, &batch)?.0)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        r.max_rel_error < 1e-4 && secs < 10.0 && r.coords_checked == model.parameter_count(),
        format!("max rel error {:.2e} over {} coordinates in {secs:.2}s", r.max_rel_error, r.coords_checked),
    )
}

// 2
fn gating_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let config = ModelConfig {
        num_blocks: 1,
        hidden_size: 8,
        ffn_inner: 8,
        num_experts: 8,
        moe_blocks: vec![0],
        ..ModelConfig::default()
    };
    let mut worst_sum: f64 = 0.0;
    let mut masked_nonzero = 0usize;
    let mut tokens = 0usize;
    for trial in 0..50u64 {
        let mut model = Model::init(config.clone(), trial).unwrap();
        let mut mask: Vec<bool> = (0..8).map(|_| rng.random_bool(0.5)).collect();
        if !mask.iter().any(|m| *m) {
            mask[rng.random_range(0..8)] = true;
        }
        model.set_active(0, &mask).unwrap();
        let x = random(&mut rng, &[1000, 8], 1.0 + trial as f64);
        let gate = model.moe_layer(0).unwrap().gate_values(model.params().values(), &x).unwrap();
        for t in 0..1000 {
            let row = gate.alphas.row(t);
            let sum: f64 = row.iter().zip(&mask).filter(|(_, m)| **m).map(|(a, _)| a).sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
            masked_nonzero += row.iter().zip(&mask).filter(|(a, m)| !**m && a.to_bits() != 0).count();
        }
        tokens += 1000;
    }
    outcome(
        worst_sum < 1e-9 && masked_nonzero == 0,
        format!("{tokens} tokens over 50 masks: max |sum - 1| {worst_sum:.1e}, {masked_nonzero} non-zero masked alphas"),
    )
}

// 3
fn drive_schedule(config: &PruneConfig, script: usize) -> (ScheduleState, Vec<Vec<usize>>) {
    let e = config.num_experts;
    let mut state = ScheduleState::new(&[vec![true; e]]).unwrap();
    let mut ledger = Ledger::new(1, e);
    let mut history = Vec::new();
    for step in 1..=config.total_steps {
        let mask = state.layers[0].survivors.clone();
        let mut s: Vec<f64> = match script {
            0 => vec![1.0; e],
            1 => (0..e).map(|i| 0.5f64.powi(i as i32)).collect(),
            2 => (0..e).map(|i| if i + 1 == e { 0.9 } else { 0.1 / e as f64 }).collect(),
            3 => (0..e).map(|i| if i == (step / 7) as usize % e { 3.0 } else { 1.0 }).collect(),
            k => {
                let mut rng = ChaCha8Rng::seed_from_u64((k as u64) << 32 ^ step);
                (0..e).map(|_| rng.random_range(0.01..1.0)).collect()
            }
        };
        let total: f64 = s.iter().zip(&mask).filter(|(_, m)| **m).map(|(v, _)| v).sum();
        for (v, m) in s.iter_mut().zip(&mask) {
            *v = if *m { *v / total } else { 0.0 };
        }
        let top = (0..e).filter(|&i| mask[i]).max_by(|&a, &b| s[a].total_cmp(&s[b]).then(b.cmp(&a))).unwrap();
        ledger
            .accumulate(&[GateResult {
                alphas: Tensor::new(vec![1, e], s).unwrap(),
                top1: vec![top],
                balance_loss: 0.0,
            }])
            .unwrap();
        if config.is_boundary(step) {
            on_window_end(&mut state, &mut ledger, config, step).unwrap();
        }
        history.push(state.layers[0].survivor_ids());
    }
    (state, history)
}

fn schedule_state_machine() -> Outcome {
    let mut runs = 0;
    let mut failures = Vec::new();
    let mut clamps_high_beta = 0;
    for e in [2usize, 4, 8] {
        for gamma in [0.25, 0.5, 1.0] {
            for beta in [0.0, 0.5, 1.0, 1.5] {
                for mode in [PruneMode::Staged, PruneMode::Eager] {
                    for n in [37u64, 64, 100] {
                        for script in 0..7 {
                            runs += 1;
                            let config = PruneConfig {
                                beta,
                                gamma,
                                ..PruneConfig::new(mode, n, e)
                            };
                            let (state, history) = drive_schedule(&config, script);
                            let mut prev: Vec<usize> = (0..e).collect();
                            let mut ok = true;
                            for (i, now) in history.iter().enumerate() {
                                let step = i as u64 + 1;
                                ok &= !now.is_empty() && now.iter().all(|x| prev.contains(x));
                                ok &= step < n / 2 || now.len() == 1;
                                prev = now.clone();
                            }
                            ok &= beta > 1.0 || state.clamp_activations == 0;
                            if beta > 1.0 {
                                clamps_high_beta += state.clamp_activations;
                            }
                            let logged: Vec<Vec<usize>> = state.events.iter().map(|ev| ev.dropped.clone()).collect();
                            ok &= replay(&[vec![true; e]], &state.events) == logged;
                            if !ok {
                                failures.push(format!("E={e} gamma={gamma} beta={beta} {mode:?} N={n} script {script}"));
                            }
                        }
                    }
                }
            }
        }
    }
    outcome(
        failures.is_empty() && clamps_high_beta > 0,
        format!(
            "{runs} scripted runs, {} violations{}; clamp fired {clamps_high_beta} times, all at beta 1.5",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

// 4
fn threshold_arithmetic() -> Outcome {
    let (a, b) = (threshold(1.0, 32), threshold(0.5, 4));
    outcome(a == 0.03125 && b == 0.125, format!("T(1, 32) = {a}, T(0.5, 4) = {b}"))
}

// 5
fn collapse_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let config = ModelConfig {
            num_blocks: 1,
            moe_blocks: vec![0],
            ..ModelConfig::default()
        };
        let mut model = Model::init(config, trial).unwrap();
        let mut mask = vec![false; 8];
        mask[rng.random_range(0..8)] = true;
        model.set_active(0, &mask).unwrap();
        let layer = model.moe_layer(0).unwrap();
        let params = model.params().values();
        let x = random(&mut rng, &[8, 32], 3.0);
        let masked = layer.forward_values(params, &x).unwrap();
        let dense = layer.collapse_to_dense().unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = dense.forward(&mut g, params, xv).unwrap();
        worst = worst.max(masked.max_abs_diff(g.value(y)));
    }
    outcome(worst <= 1e-12, format!("max elementwise difference {worst:.1e} over 100 inputs"))
}

// Shared default-scale runs.
struct Setup {
    config: RunConfig,
    root: PathBuf,
    moe_ckpt: PathBuf,
    moe: Model,
    dense: Model,
    moe_pretrain: Duration,
    dense_pretrain: Duration,
    run_secs: BTreeMap<PathBuf, f64>,
}

impl Setup {
    fn new(root: &Path) -> Self {
        let config = RunConfig::default();
        let t = Instant::now();
        let moe_ckpt = runner::pretrain(&config, false, &root.join("pretrain-moe")).unwrap();
        let moe_pretrain = t.elapsed();
        let t = Instant::now();
        let dense_ckpt = runner::pretrain(&config, true, &root.join("pretrain-dense")).unwrap();
        let dense_pretrain = t.elapsed();
        println!(
            "       pre-training: moe {:.0}s, dense {:.0}s",
            moe_pretrain.as_secs_f64(),
            dense_pretrain.as_secs_f64()
        );
        Self {
            moe: runner::load_pretrained(&moe_ckpt).unwrap().0,
            dense: runner::load_pretrained(&dense_ckpt).unwrap().0,
            config,
            root: root.to_path_buf(),
            moe_ckpt,
            moe_pretrain,
            dense_pretrain,
            run_secs: BTreeMap::new(),
        }
    }

    fn dir(&self, setting: Setting, criterion: Criterion, seed: u64) -> PathBuf {
        let c = match criterion {
            Criterion::Alpha => "alpha",
            Criterion::HitRate => "hit_rate",
        };
        self.root.join("runs").join(c).join(setting.as_str()).join(format!("seed-{seed}"))
    }

    fn run(&mut self, setting: Setting, criterion: Criterion, seed: u64) -> PathBuf {
        let dir = self.dir(setting, criterion, seed);
        if self.run_secs.contains_key(&dir) {
            return dir;
        }
        let mut config = self.config.clone();
        config.finetune.criterion = criterion;
        let model = if setting == Setting::DenseFt { &self.dense } else { &self.moe };
        let t = Instant::now();
        runner::finetune_one(&config, model, setting, seed, &dir, StopAt(None)).unwrap();
        self.run_secs.insert(dir.clone(), t.elapsed().as_secs_f64());
        dir
    }

    fn secs(&self, setting: Setting, criterion: Criterion, seeds: &[u64]) -> f64 {
        seeds.iter().map(|s| self.run_secs[&self.dir(setting, criterion, *s)]).sum()
    }
}

fn loaded(dirs: &[PathBuf]) -> Vec<LoadedRun> {
    let (runs, warnings) = report::load_runs(dirs);
    assert!(warnings.is_empty(), "{warnings:?}");
    assert_eq!(runs.len(), dirs.len());
    runs
}

fn mean_accuracy(dirs: &[PathBuf]) -> f64 {
    let r = report::build(&loaded(dirs));
    assert_eq!(r.settings.len(), 1);
    r.settings[0].mean
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

// 6
fn expert_tensors(t: &Trainer, layer: usize, expert: usize) -> Vec<Tensor> {
    let l = t.model.moe_layer(layer).unwrap();
    l.experts[expert].params().iter().map(|id| t.model.params().get(*id).clone()).collect()
}

fn frozen_experts(setup: &Setup) -> Outcome {
    let task = TaskSpec::new(setup.config.task.clone()).unwrap();
    let mut t = finetuner(&setup.moe, &task, &setup.config.finetune, PruneMode::Eager, 1).unwrap();
    let mut frozen: BTreeMap<(usize, usize), (u64, Vec<Tensor>)> = BTreeMap::new();
    let mut seen = 0;
    let mut moved = Vec::new();
    let mut checks = 0u64;
    while !t.is_done() {
        t.train_step().unwrap();
        for e in &t.schedule.events[seen..] {
            for &d in &e.dropped {
                frozen.insert((e.layer, d), (e.step, expert_tensors(&t, e.layer, d)));
            }
        }
        seen = t.schedule.events.len();
        for ((layer, expert), (_, snap)) in &frozen {
            checks += 1;
            if &expert_tensors(&t, *layer, *expert) != snap {
                moved.push((t.step, *layer, *expert));
            }
        }
    }
    // The same run through the runner must end in the same state.
    let reference = std::fs::read(setup.dir(Setting::EagerPruning, Criterion::Alpha, 1).join(CHECKPOINT)).unwrap();
    let same = Checkpoint::from_trainer(&t).to_bytes().unwrap() == reference;
    let drops: Vec<String> = frozen.iter().map(|((l, e), (s, _))| format!("L{l}E{e}@{s}")).collect();
    outcome(
        moved.is_empty() && !frozen.is_empty() && same,
        format!(
            "{} dropped experts ({}), {checks} per-step checks, {} changes; matches runner checkpoint: {same}",
            frozen.len(),
            drops.join(" "),
            moved.len()
        ),
    )
}

// 7
fn long_tail(setup: &Setup) -> Outcome {
    let seeds = [1, 2, 3];
    let dirs: Vec<PathBuf> = seeds.iter().map(|&s| setup.dir(Setting::MoeFt, Criterion::Alpha, s)).collect();
    let r = report::build(&loaded(&dirs));
    let e = setup.config.model.num_experts as f64;
    let top: Vec<(usize, f64)> = r.histogram.iter().filter(|h| h.rank == 0).map(|h| (h.layer, h.mean_share)).collect();
    let secs = setup.moe_pretrain.as_secs_f64() + setup.secs(Setting::MoeFt, Criterion::Alpha, &seeds);
    let per_layer: Vec<String> = top.iter().map(|(l, s)| format!("layer {l} {s:.3}")).collect();
    outcome(
        !top.is_empty() && top.iter().all(|(_, s)| *s > 2.0 / e) && secs < 300.0,
        format!(
            "final-window max share (mean of 3 seeds) {} vs 2/E = {:.3}; pre-train + 3 runs {secs:.0}s",
            per_layer.join(", "),
            2.0 / e
        ),
    )
}

// 8
fn quality_ordering(setup: &Setup) -> Outcome {
    let dirs = |s| SEEDS.iter().map(|&seed| setup.dir(s, Criterion::Alpha, seed)).collect::<Vec<_>>();
    let dense = mean_accuracy(&dirs(Setting::DenseFt));
    let moe = mean_accuracy(&dirs(Setting::MoeFt));
    let eager = mean_accuracy(&dirs(Setting::EagerPruning));
    let staged = mean_accuracy(&dirs(Setting::StagedPruning));
    let secs = setup.moe_pretrain.as_secs_f64()
        + setup.dense_pretrain.as_secs_f64()
        + [Setting::DenseFt, Setting::MoeFt, Setting::EagerPruning, Setting::StagedPruning]
            .iter()
            .map(|s| setup.secs(*s, Criterion::Alpha, &SEEDS))
            .sum::<f64>();
    let pass = eager >= dense - 0.005 && eager >= staged - 0.005 && moe >= dense && secs < 1800.0;
    outcome(
        pass,
        format!(
            "5-seed accuracy: dense-ft {}, moe-ft {}, eager {}, staged {}; {secs:.0}s",
            pct(dense),
            pct(moe),
            pct(eager),
            pct(staged)
        ),
    )
}

// 9
fn separable_selection() -> (bool, String) {
    let task = TaskSpec::new(TaskConfig::default()).unwrap();
    let (k, f) = (task.num_subtasks(), task.config().feature_dim);
    let config = ModelConfig {
        num_blocks: 1,
        hidden_size: f,
        num_experts: k,
        moe_blocks: vec![0],
        ..ModelConfig::default()
    };
    let mut model = Model::init(config, 0).unwrap();
    // Router column e scores a token by its projection onto center e.
    let router = model.moe_layer(0).unwrap().router;
    let r2 = task.config().center_radius * task.config().center_radius;
    let mut w = Tensor::zeros(&[f, k]);
    for e in 0..k {
        for j in 0..f {
            w.data_mut()[j * k + e] = 8.0 * task.centers().row(e)[j] / r2;
        }
    }
    model.params_mut().values_mut()[router.0] = w;
    let layer = model.moe_layer(0).unwrap().clone();

    let mut agree = 0;
    let mut on_own = 0;
    let mut cases = 0;
    for subtask in 0..k {
        for mode in [PruneMode::Eager, PruneMode::Staged] {
            let mut finals = Vec::new();
            for criterion in [Criterion::Alpha, Criterion::HitRate] {
                let config = PruneConfig {
                    criterion,
                    ..PruneConfig::new(mode, 64, k)
                };
                let mut state = ScheduleState::new(&[vec![true; k]]).unwrap();
                let mut ledger = Ledger::new(1, k);
                let mut rng = ChaCha8Rng::seed_from_u64(subtask as u64);
                let mut masked = layer.clone();
                for step in 1..=config.total_steps {
                    masked.set_active(&state.layers[0].survivors).unwrap();
                    let b = gen_finetune_batch(&task, subtask, 4, &mut rng).unwrap();
                    let tokens = b.features.clone().reshape(&[b.num_tokens(), f]).unwrap();
                    let gate = masked.gate_values(model.params().values(), &tokens).unwrap();
                    ledger.accumulate(&[gate]).unwrap();
                    if config.is_boundary(step) {
                        on_window_end(&mut state, &mut ledger, &config, step).unwrap();
                    }
                }
                finals.push(state.layers[0].survivor_ids());
            }
            cases += 1;
            agree += (finals[0] == finals[1]) as usize;
            on_own += (finals[0] == [subtask]) as usize;
        }
    }
    (
        agree == cases,
        format!("separable task: criteria agree on {agree}/{cases} final experts ({on_own} on the subtask's own expert)"),
    )
}

fn criterion_comparison(setup: &Setup) -> Outcome {
    let (same, detail) = separable_selection();
    let dirs = |c| SEEDS.iter().map(|&seed| setup.dir(Setting::EagerPruning, c, seed)).collect::<Vec<_>>();
    let alpha = mean_accuracy(&dirs(Criterion::Alpha));
    let hits = mean_accuracy(&dirs(Criterion::HitRate));
    outcome(
        same && alpha >= hits - 0.005,
        format!("{detail}; default task eager: alpha {}, hit rate {}", pct(alpha), pct(hits)),
    )
}

// 10
fn bench(setup: &Setup) -> Outcome {
    let pruned = Checkpoint::load(&setup.dir(Setting::EagerPruning, Criterion::Alpha, 1).join(CHECKPOINT))
        .unwrap()
        .to_model()
        .unwrap();
    let variants = Variants::new(&setup.moe, &pruned, &setup.dense).unwrap();
    let task = TaskSpec::new(setup.config.task.clone()).unwrap();
    let b = &setup.config.bench;
    let run = || bench_inference(&variants, &task, b.batch_size, b.warmup, b.repetitions).unwrap();
    let (first, second): (BenchReport, BenchReport) = (run(), run());
    let mut drift: f64 = 0.0;
    for v in Variant::ALL {
        let (x, y) = (first.get(v).tokens_per_sec, second.get(v).tokens_per_sec);
        drift = drift.max((x - y).abs() / x.min(y));
    }
    let tps = |v| first.get(v).tokens_per_sec;
    let speedup = first.pruned_over_moe;
    outcome(
        speedup >= 1.5 && tps(Variant::CollapsedDense) >= tps(Variant::MaskedSingleExpert) && drift <= 0.10,
        format!(
            "batch {} seq {}: collapsed {:.0} tok/s, masked {:.0}, moe {:.0}, dense {:.0}; collapsed/moe {speedup:.2}, collapsed/masked {:.2}, collapsed/dense {:.2}; run-to-run drift {:.1}%",
            b.batch_size,
            task.config().tokens_per_sequence,
            tps(Variant::CollapsedDense),
            tps(Variant::MaskedSingleExpert),
            tps(Variant::MoeAllExperts),
            tps(Variant::DensePretrained),
            first.collapsed_over_masked,
            first.pruned_over_dense,
            100.0 * drift
        ),
    )
}

// 11
fn persistence(setup: &Setup) -> Outcome {
    let original = std::fs::read(&setup.moe_ckpt).unwrap();
    let copy = setup.root.join("resaved.moep");
    Checkpoint::load(&setup.moe_ckpt).unwrap().save(&copy).unwrap();
    let round_trip = std::fs::read(&copy).unwrap() == original;

    let reference = setup.dir(Setting::EagerPruning, Criterion::Alpha, 1);
    let resumed = setup.root.join("resumed").join("eager-pruning").join("seed-1");
    let stop = setup.config.finetune.train.steps / 2 - 37;
    runner::finetune_one(&setup.config, &setup.moe, Setting::EagerPruning, 1, &resumed, StopAt(Some(stop))).unwrap();
    let mid = resumed.join(CHECKPOINT);
    let mid_copy = setup.root.join("mid.moep");
    Checkpoint::load(&mid).unwrap().save(&mid_copy).unwrap();
    let mid_round_trip = std::fs::read(&mid).unwrap() == std::fs::read(&mid_copy).unwrap();
    runner::resume(&resumed).unwrap();
    let same = |name: &str| std::fs::read(reference.join(name)).unwrap() == std::fs::read(resumed.join(name)).unwrap();
    let (ckpt, metrics, events) = (same(CHECKPOINT), same(METRICS), same(EVENTS));
    outcome(
        round_trip && mid_round_trip && ckpt && metrics && events,
        format!(
            "save/load/save identical: pre-trained {round_trip}, mid-run {mid_round_trip}; stopped at {stop} and resumed: checkpoint {ckpt}, metrics {metrics}, events {events}"
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |id: u32, name: &'static str, o: Outcome| {
        println!("{} {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    record(1, "gradient correctness", gradient_correctness());
    record(2, "gating conservation", gating_conservation());
    record(3, "schedule state machine", schedule_state_machine());
    record(4, "threshold arithmetic", threshold_arithmetic());
    record(5, "collapse equivalence", collapse_equivalence());

    let tmp = tempfile::tempdir().unwrap();
    let mut setup = Setup::new(tmp.path());
    for setting in [Setting::DenseFt, Setting::MoeFt, Setting::EagerPruning, Setting::StagedPruning] {
        for seed in SEEDS {
            setup.run(setting, Criterion::Alpha, seed);
        }
    }
    for seed in SEEDS {
        setup.run(Setting::EagerPruning, Criterion::HitRate, seed);
    }

    record(6, "frozen experts", frozen_experts(&setup));
    record(7, "long-tailed routing", long_tail(&setup));
    record(8, "quality ordering", quality_ordering(&setup));
    record(9, "criterion comparison", criterion_comparison(&setup));
    record(10, "inference bench", bench(&setup));
    record(11, "persistence", persistence(&setup));

    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| format!("{} ({})", r.0, r.1)).collect();
    println!("{}/{} criteria passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
