//! Summary tables and plot data built from run directories.
//!
//! Every number comes from a metrics row (or arithmetic on metrics rows);
//! `run.json` only supplies labels such as the setting name and seed.
//!
//! Outputs (CSV plus one SVG each):
//! - `settings`: accuracy mean and std over seeds per setting.
//! - `shares`: per-window expert shares per layer.
//! - `k_half`: survivors entering the half-schedule decision vs beta.
//! - `histogram`: final-window shares sorted per layer, for unpruned runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use moep_core::prune::Criterion;

use crate::error::{Error, Result};
use crate::metrics::{self, MetricsRow};
use crate::runner::{RunInfo, METRICS, RUN_INFO};
use crate::svg;

#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub info: RunInfo,
    pub rows: Vec<MetricsRow>,
}

impl LoadedRun {
    /// Accuracy of the last eval row.
    pub fn accuracy(&self) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.phase == "eval").and_then(|r| r.share)
    }

    fn windows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(|r| r.phase == "window")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SettingRow {
    pub setting: String,
    pub criterion: String,
    pub beta: f64,
    pub gamma: f64,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KHalfRow {
    pub beta: f64,
    pub layer: usize,
    pub runs: usize,
    pub mean_survivors: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramRow {
    pub layer: usize,
    pub rank: usize,
    pub runs: usize,
    pub mean_share: f64,
    pub max_share: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub settings: Vec<SettingRow>,
    pub k_half: Vec<KHalfRow>,
    pub histogram: Vec<HistogramRow>,
    pub warnings: Vec<String>,
    pub runs: usize,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn find_runs(root: &Path, out: &mut Vec<PathBuf>) {
    if root.join(RUN_INFO).is_file() {
        out.push(root.to_path_buf());
    }
    let Ok(entries) = fs::read_dir(root) else { return };
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    dirs.sort();
    for d in dirs {
        find_runs(&d, out);
    }
}

/// Loads every run directory under `roots`; unreadable runs become warnings.
pub fn load_runs(roots: &[PathBuf]) -> (Vec<LoadedRun>, Vec<String>) {
    let mut dirs = Vec::new();
    for r in roots {
        find_runs(r, &mut dirs);
    }
    let mut runs = Vec::new();
    let mut warnings = Vec::new();
    for dir in dirs {
        let loaded = RunInfo::load(&dir).and_then(|info| Ok((info, metrics::read_csv(&dir.join(METRICS))?)));
        match loaded {
            Ok((info, rows)) => runs.push(LoadedRun { dir, info, rows }),
            Err(e) => warnings.push(format!("skipping {}: {e}", dir.display())),
        }
    }
    (runs, warnings)
}

fn key(x: f64) -> u64 {
    x.to_bits()
}

/// Survivor count entering the half-schedule decision, per layer: the count
/// after the last boundary before `floor(N/2)`, or all experts if none.
pub fn k_half(run: &LoadedRun) -> BTreeMap<usize, usize> {
    let half = run.info.total_steps / 2;
    let mut out = BTreeMap::new();
    for r in run.windows() {
        let (Some(layer), Some(s)) = (r.layer, r.survivors) else { continue };
        out.entry(layer).or_insert((0u64, run.info.num_experts));
        if r.step < half {
            let e = out.get_mut(&layer).expect("inserted");
            if r.step >= e.0 {
                *e = (r.step, s);
            }
        }
    }
    out.into_iter().map(|(l, (_, s))| (l, s)).collect()
}

/// Shares of the last non-empty window per layer, sorted descending.
pub fn final_shares(run: &LoadedRun) -> BTreeMap<usize, Vec<f64>> {
    let mut last: BTreeMap<usize, (u64, Vec<f64>)> = BTreeMap::new();
    for r in run.windows() {
        let (Some(layer), Some(share)) = (r.layer, r.share) else { continue };
        let e = last.entry(layer).or_insert((r.step, Vec::new()));
        if r.step > e.0 {
            *e = (r.step, Vec::new());
        }
        if r.step == e.0 {
            e.1.push(share);
        }
    }
    last.into_iter()
        .map(|(l, (_, mut s))| {
            s.sort_by(|a, b| b.total_cmp(a));
            (l, s)
        })
        .collect()
}

pub fn build(runs: &[LoadedRun]) -> Report {
    let mut report = Report {
        runs: runs.len(),
        ..Report::default()
    };

    let mut groups: BTreeMap<(String, String, u64, u64), (f64, f64, Vec<f64>)> = BTreeMap::new();
    for run in runs.iter().filter(|r| r.info.kind != "pretrain" && r.info.kind != "pass1") {
        let Some(acc) = run.accuracy() else {
            report.warnings.push(format!("{}: no eval row, run skipped", run.dir.display()));
            continue;
        };
        let criterion = match run.info.criterion {
            Criterion::Alpha => "alpha",
            Criterion::HitRate => "hit_rate",
        }
        .to_string();
        let g = groups
            .entry((run.info.kind.clone(), criterion, key(run.info.beta), key(run.info.gamma)))
            .or_insert((run.info.beta, run.info.gamma, Vec::new()));
        g.2.push(acc);
    }
    for ((setting, criterion, _, _), (beta, gamma, accs)) in groups {
        let (mean, std) = mean_std(&accs);
        report.settings.push(SettingRow {
            setting,
            criterion,
            beta,
            gamma,
            runs: accs.len(),
            mean,
            std,
        });
    }

    let mut kh: BTreeMap<(u64, usize), (f64, Vec<f64>)> = BTreeMap::new();
    for run in runs.iter().filter(|r| r.info.mode == "eager") {
        for (layer, s) in k_half(run) {
            kh.entry((key(run.info.beta), layer)).or_insert((run.info.beta, Vec::new())).1.push(s as f64);
        }
    }
    for ((_, layer), (beta, xs)) in kh {
        report.k_half.push(KHalfRow {
            beta,
            layer,
            runs: xs.len(),
            mean_survivors: mean_std(&xs).0,
        });
    }
    report.k_half.sort_by(|a, b| a.beta.total_cmp(&b.beta).then(a.layer.cmp(&b.layer)));

    let mut hist: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for run in runs.iter().filter(|r| r.info.mode == "none" && r.info.kind != "pretrain" && r.info.num_experts > 1) {
        for (layer, shares) in final_shares(run) {
            for (rank, s) in shares.into_iter().enumerate() {
                hist.entry((layer, rank)).or_default().push(s);
            }
        }
    }
    for ((layer, rank), xs) in hist {
        report.histogram.push(HistogramRow {
            layer,
            rank,
            runs: xs.len(),
            mean_share: mean_std(&xs).0,
            max_share: xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    report
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

fn csv_of(header: &str, lines: impl Iterator<Item = String>) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for l in lines {
        s.push_str(&l);
        s.push('\n');
    }
    s
}

/// Writes all tables and charts into `out`.
pub fn emit(runs: &[LoadedRun], report: &Report, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(Error::io(out))?;

    write(
        &out.join("settings.csv"),
        &csv_of(
            "setting,criterion,beta,gamma,runs,mean_accuracy,std_accuracy",
            report.settings.iter().map(|r| {
                format!("{},{},{},{},{},{:.6},{:.6}", r.setting, r.criterion, r.beta, r.gamma, r.runs, r.mean, r.std)
            }),
        ),
    )?;
    let bars: Vec<(String, f64, Option<f64>)> = report
        .settings
        .iter()
        .map(|r| (r.setting.clone(), r.mean, Some(r.std)))
        .collect();
    write(&out.join("settings.svg"), &svg::bar_chart("Accuracy by setting", "accuracy", &bars, None))?;

    let mut share_lines = Vec::new();
    let mut plotted = 0;
    for run in runs.iter().filter(|r| r.info.kind != "pretrain") {
        let mut per_layer: BTreeMap<usize, BTreeMap<usize, Vec<(f64, f64)>>> = BTreeMap::new();
        for r in run.windows() {
            let (Some(layer), Some(expert), Some(window)) = (r.layer, r.expert, r.window) else { continue };
            let share = r.share.map_or(String::new(), |s| format!("{s:.9}"));
            share_lines.push(format!(
                "{},{},{},{},{},{},{},{},{}",
                run.dir.display(),
                run.info.kind,
                run.info.seed,
                layer,
                r.step,
                window,
                expert,
                share,
                r.event
            ));
            per_layer.entry(layer).or_default().entry(expert).or_default().push((window as f64, r.share.unwrap_or(0.0)));
        }
        // Charts for the first run of each pruning mode.
        if plotted < 2 && run.info.mode != "none" && !per_layer.is_empty() {
            plotted += 1;
            for (layer, experts) in per_layer {
                let series: Vec<(String, Vec<(f64, f64)>)> =
                    experts.into_iter().map(|(e, p)| (format!("expert {e}"), p)).collect();
                let title = format!("{} seed {} layer {layer}: share per window", run.info.kind, run.info.seed);
                write(
                    &out.join(format!("shares_{}_layer{layer}.svg", run.info.kind)),
                    &svg::line_chart(&title, "window", "share", &series),
                )?;
            }
        }
    }
    write(
        &out.join("shares.csv"),
        &csv_of("run,setting,seed,layer,step,window,expert,share,event", share_lines.into_iter()),
    )?;

    write(
        &out.join("k_half.csv"),
        &csv_of(
            "beta,layer,runs,mean_survivors",
            report.k_half.iter().map(|r| format!("{},{},{},{:.6}", r.beta, r.layer, r.runs, r.mean_survivors)),
        ),
    )?;
    let mut by_layer: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &report.k_half {
        by_layer.entry(r.layer).or_default().push((r.beta, r.mean_survivors));
    }
    let series: Vec<(String, Vec<(f64, f64)>)> = by_layer.into_iter().map(|(l, p)| (format!("layer {l}"), p)).collect();
    write(
        &out.join("k_half.svg"),
        &svg::line_chart("Survivors at half schedule vs beta", "beta", "survivors", &series),
    )?;

    write(
        &out.join("histogram.csv"),
        &csv_of(
            "layer,rank,runs,mean_share,max_share",
            report
                .histogram
                .iter()
                .map(|r| format!("{},{},{},{:.9},{:.9}", r.layer, r.rank, r.runs, r.mean_share, r.max_share)),
        ),
    )?;
    let layers: Vec<usize> = {
        let mut l: Vec<usize> = report.histogram.iter().map(|r| r.layer).collect();
        l.dedup();
        l
    };
    for layer in layers {
        let rows: Vec<&HistogramRow> = report.histogram.iter().filter(|r| r.layer == layer).collect();
        let uniform = 1.0 / rows.len() as f64;
        let bars: Vec<(String, f64, Option<f64>)> =
            rows.iter().map(|r| (format!("#{}", r.rank + 1), r.mean_share, None)).collect();
        write(
            &out.join(format!("histogram_layer{layer}.svg")),
            &svg::bar_chart(&format!("Final-window expert shares, layer {layer} (sorted)"), "share", &bars, Some(uniform)),
        )?;
    }
    Ok(())
}

/// Loads, builds and writes a report. Fails when no run could be read.
pub fn report(roots: &[PathBuf], out: &Path) -> Result<Report> {
    let (runs, mut warnings) = load_runs(roots);
    if runs.is_empty() {
        return Err(Error::Config(format!(
            "no readable run directories under {}",
            roots.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
        )));
    }
    let mut report = build(&runs);
    warnings.append(&mut report.warnings);
    report.warnings = warnings;
    emit(&runs, &report, out)?;
    Ok(report)
}
