use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use moep::bench::{bench_inference, Variants};
use moep::checkpoint::Checkpoint;
use moep::config::RunConfig;
use moep::report::{self, mean_std};
use moep::runner::{self, RunSummary, StopAt, SweepParam};
use moep_core::data::TaskSpec;
use moep_core::prune::Criterion;
use moep_core::train::Setting;

#[derive(Parser)]
#[command(name = "moep", version, about = "Task-specific expert pruning for mixture-of-experts models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train an MoE (or dense) model on the subtask mixture.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace every MoE block with a dense FFN.
        #[arg(long)]
        dense: bool,
    },
    /// Fine-tune one setting over several seeds.
    Finetune(FinetuneArgs),
    /// Select experts in a first pass, then re-fine-tune the restricted model.
    TwoPass(FinetuneArgs),
    /// Run one setting for every value of a fine-tuning parameter.
    Sweep {
        #[command(flatten)]
        run: FinetuneArgs,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Continue an interrupted fine-tuning run directory.
    Resume { dir: PathBuf },
    /// Time inference of MoE, masked, collapsed and dense variants.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Any checkpoint of the MoE architecture (all experts are enabled).
        #[arg(long)]
        moe: PathBuf,
        /// Checkpoint with one surviving expert per MoE layer.
        #[arg(long)]
        pruned: PathBuf,
        /// Dense checkpoint of the same width.
        #[arg(long)]
        dense: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summaries and plots over run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    /// dense, moe, staged or eager (setting names are accepted too).
    #[arg(long, default_value = "eager")]
    mode: String,
    #[arg(long)]
    subtask: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_enum)]
    criterion: Option<CriterionArg>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Stop every run after this many steps; continue later with `resume`.
    #[arg(long)]
    stop_at: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Alpha,
    HitRate,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn out_root(config: &RunConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| config.output_root())
}

impl FinetuneArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = load_config(self.config.as_deref())?;
        let ft = &mut c.finetune;
        if let Some(s) = self.subtask {
            ft.subtask = s;
        }
        if let Some(b) = self.beta {
            ft.beta = b;
        }
        if let Some(g) = self.gamma {
            ft.gamma = g;
        }
        if let Some(k) = self.criterion {
            ft.criterion = match k {
                CriterionArg::Alpha => Criterion::Alpha,
                CriterionArg::HitRate => Criterion::HitRate,
            };
        }
        if let Some(n) = self.steps {
            ft.train.steps = n;
        }
        if let Some(s) = &self.seeds {
            c.seeds = s.clone();
        }
        c.validate()?;
        Ok(c)
    }

    fn setting(&self, two_pass: bool) -> Result<Setting> {
        let s = Setting::parse(&self.mode).with_context(|| format!("unknown mode {:?}", self.mode))?;
        if !two_pass {
            return Ok(s);
        }
        Ok(match s {
            Setting::StagedPruning | Setting::TwoPassStaged => Setting::TwoPassStaged,
            Setting::EagerPruning | Setting::TwoPassEager => Setting::TwoPassEager,
            _ => bail!("two-pass needs --mode staged or eager"),
        })
    }
}

fn print_aggregate(label: &str, runs: &[RunSummary]) {
    let accs: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let (mean, std) = mean_std(&accs);
    println!("{label}: accuracy {:.2} ± {:.2} over {} seeds", 100.0 * mean, 100.0 * std, accs.len());
}

fn finetune(args: &FinetuneArgs, two_pass: bool) -> Result<()> {
    let config = args.config()?;
    let setting = args.setting(two_pass)?;
    let root = out_root(&config, args.out.clone());
    let ckpt = Checkpoint::load_expecting(&args.ckpt, &config.model).or_else(|e| {
        // Dense checkpoints carry the dense counterpart of the configured model.
        Checkpoint::load_expecting(&args.ckpt, &config.model.dense_counterpart()).map_err(|_| e)
    })?;
    let pretrained = ckpt.to_model()?;
    let runs: Vec<RunSummary> = if args.stop_at.is_some() {
        config
            .seeds
            .iter()
            .map(|&seed| {
                let dir = root.join(setting.as_str()).join(format!("seed-{seed}"));
                runner::finetune_one(&config, &pretrained, setting, seed, &dir, StopAt(args.stop_at))
            })
            .collect::<moep::Result<_>>()?
    } else {
        runner::finetune_seeds(&config, &pretrained, setting, &root)?
    };
    if args.stop_at.is_some() {
        for r in &runs {
            println!("stopped {}; continue with `moep resume {}`", r.dir.display(), r.dir.display());
        }
        return Ok(());
    }
    for r in &runs {
        println!("{} seed {}: {:.2}", setting.as_str(), r.seed, 100.0 * r.accuracy);
    }
    print_aggregate(setting.as_str(), &runs);
    emit_report(&[root.join(setting.as_str())], &root.join("report").join(setting.as_str()))
}

fn emit_report(roots: &[PathBuf], out: &Path) -> Result<()> {
    let r = report::report(roots, out)?;
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    println!("report for {} runs written to {}", r.runs, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, out, dense } => {
            let config = load_config(config.as_deref())?;
            let dir = out_root(&config, out);
            let path = runner::pretrain(&config, dense, &dir)?;
            println!("checkpoint written to {}", path.display());
        }
        Command::Finetune(args) => finetune(&args, false)?,
        Command::TwoPass(args) => finetune(&args, true)?,
        Command::Sweep { run, param, values } => {
            let p = SweepParam::parse(&param).with_context(|| format!("unknown sweep parameter {param:?}"))?;
            let config = run.config()?;
            let setting = run.setting(false)?;
            let root = out_root(&config, run.out.clone()).join(format!("sweep-{}", p.as_str()));
            let pretrained = Checkpoint::load(&run.ckpt)?.to_model()?;
            let points = runner::sweep(&config, &pretrained, setting, p, &values, &root)?;
            for pt in &points {
                print_aggregate(&format!("{}={}", p.as_str(), pt.value), &pt.runs);
            }
            emit_report(&[root.clone()], &root.join("report"))?;
        }
        Command::Resume { dir } => {
            let r = runner::resume(&dir)?;
            println!("{} seed {}: {:.2}", r.setting.as_str(), r.seed, 100.0 * r.accuracy);
        }
        Command::Bench {
            config,
            moe,
            pruned,
            dense,
            out,
        } => {
            let config = load_config(config.as_deref())?;
            let moe = Checkpoint::load_expecting(&moe, &config.model)?.to_model()?;
            let pruned = Checkpoint::load_expecting(&pruned, &config.model)?.to_model()?;
            let dense = Checkpoint::load_expecting(&dense, &config.model.dense_counterpart())?.to_model()?;
            let variants = Variants::new(&moe, &pruned, &dense)?;
            let task = TaskSpec::new(config.task.clone())?;
            let b = &config.bench;
            let report = bench_inference(&variants, &task, b.batch_size, b.warmup, b.repetitions)?;
            for r in &report.results {
                println!(
                    "{:<22} {:>12.0} tokens/s  (mean {:.3} ms ± {:.3})",
                    r.variant.as_str(),
                    r.tokens_per_sec,
                    1e3 * r.mean_secs,
                    1e3 * r.std_secs
                );
            }
            println!(
                "collapsed/moe {:.2}  collapsed/dense {:.2}  collapsed/masked {:.2}",
                report.pruned_over_moe, report.pruned_over_dense, report.collapsed_over_masked
            );
            let dir = out_root(&config, out);
            std::fs::create_dir_all(&dir).map_err(|e| anyhow!("creating {}: {e}", dir.display()))?;
            let path = dir.join("bench.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)?)
                .map_err(|e| anyhow!("writing {}: {e}", path.display()))?;
        }
        Command::Report { runs, out } => {
            let out = out.unwrap_or_else(|| runs[0].join("report"));
            emit_report(&runs, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
