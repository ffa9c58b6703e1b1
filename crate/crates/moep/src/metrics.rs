//! Metrics CSV and pruning-event NDJSON.
//!
//! CSV columns: `step, phase, loss, lr, layer, window, expert, share, hits,
//! survivors, event`. Phases:
//! - `train`: one row per optimizer step (`loss`, `lr`).
//! - `window`: one row per layer and expert at each window boundary.
//!   `share` is empty for a skipped (empty) window, `survivors` counts the
//!   layer's experts after the decision, and `event` is one of `active`,
//!   `inactive`, `drop`, `force` or `clamp` (kept only by the safety clamp).
//! - `eval`: held-out accuracy in `share`, mean cross-entropy in `loss`.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use moep_core::prune::{DecisionKind, PruneEvent, PruneMode, WindowRecord};
use moep_core::train::RunMetrics;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub phase: String,
    pub loss: Option<f64>,
    pub lr: Option<f64>,
    pub layer: Option<usize>,
    pub window: Option<u64>,
    pub expert: Option<usize>,
    pub share: Option<f64>,
    pub hits: Option<u64>,
    pub survivors: Option<usize>,
    pub event: String,
}

impl MetricsRow {
    fn blank(step: u64, phase: &str) -> Self {
        Self {
            step,
            phase: phase.to_string(),
            loss: None,
            lr: None,
            layer: None,
            window: None,
            expert: None,
            share: None,
            hits: None,
            survivors: None,
            event: String::new(),
        }
    }
}

fn expert_event(record: &WindowRecord, expert: usize) -> &'static str {
    if let Some(e) = &record.event {
        if e.dropped.contains(&expert) {
            return if e.kind == DecisionKind::Force { "force" } else { "drop" };
        }
        if e.clamped && record.survivors_after.contains(&expert) {
            return "clamp";
        }
    }
    if record.survivors_before.contains(&expert) {
        "active"
    } else {
        "inactive"
    }
}

pub fn window_rows(record: &WindowRecord) -> Vec<MetricsRow> {
    (0..record.hits.len())
        .map(|expert| MetricsRow {
            layer: Some(record.layer),
            window: Some(record.window),
            expert: Some(expert),
            share: record.shares.as_ref().map(|s| s[expert]),
            hits: Some(record.hits[expert]),
            survivors: Some(record.survivors_after.len()),
            event: expert_event(record, expert).to_string(),
            ..MetricsRow::blank(record.step, "window")
        })
        .collect()
}

/// Rows for everything in `metrics`, ordered by step (train row, then
/// window rows, then eval rows at equal steps).
pub fn rows(metrics: &RunMetrics) -> Vec<MetricsRow> {
    let mut out = Vec::new();
    let mut windows = metrics.windows.iter().peekable();
    let mut evals = metrics.evals.iter().peekable();
    let mut flush = |out: &mut Vec<MetricsRow>, upto: u64| {
        while let Some(w) = windows.next_if(|w| w.step <= upto) {
            out.extend(window_rows(w));
        }
        while let Some((step, e)) = evals.next_if(|(s, _)| *s <= upto) {
            out.push(MetricsRow {
                loss: Some(e.loss),
                share: Some(e.accuracy),
                ..MetricsRow::blank(*step, "eval")
            });
        }
    };
    for s in &metrics.steps {
        flush(&mut out, s.step.saturating_sub(1));
        out.push(MetricsRow {
            loss: Some(s.loss),
            lr: Some(s.lr),
            ..MetricsRow::blank(s.step, "train")
        });
    }
    flush(&mut out, u64::MAX);
    out
}

/// Writes rows; with `append` the header is only written to a new file.
pub fn write_csv(path: &Path, rows: &[MetricsRow], append: bool) -> Result<()> {
    let exists = append && path.exists() && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(Error::io(path))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(Error::io(path))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
    Ok(rows)
}

fn fixed(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.9}")).collect();
    format!("[{}]", parts.join(","))
}

fn ids(xs: &[usize]) -> String {
    let parts: Vec<String> = xs.iter().map(usize::to_string).collect();
    format!("[{}]", parts.join(","))
}

/// One JSON object per line; shares carry exactly nine decimals.
pub fn event_line(e: &PruneEvent) -> String {
    let kind = match e.kind {
        DecisionKind::Threshold => "threshold",
        DecisionKind::Staged => "staged",
        DecisionKind::Force => "force",
    };
    format!(
        "{{\"step\":{},\"layer\":{},\"mode\":\"{}\",\"window\":{},\"kind\":\"{}\",\"beta\":{},\"clamped\":{},\"survivors_before\":{},\"dropped\":{},\"shares\":{}}}",
        e.step,
        e.layer,
        e.mode.as_str(),
        e.window,
        kind,
        serde_json::to_string(&e.beta).unwrap_or_else(|_| "null".into()),
        e.clamped,
        ids(&e.survivors_before),
        ids(&e.dropped),
        fixed(&e.shares),
    )
}

pub fn write_events(path: &Path, events: &[PruneEvent], append: bool) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(Error::io(path))?;
    for e in events {
        writeln!(file, "{}", event_line(e)).map_err(Error::io(path))?;
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EventJson {
    step: u64,
    layer: usize,
    mode: String,
    window: u64,
    kind: String,
    beta: f64,
    clamped: bool,
    survivors_before: Vec<usize>,
    dropped: Vec<usize>,
    shares: Vec<f64>,
}

pub fn read_events(path: &Path) -> Result<Vec<PruneEvent>> {
    let file = fs::File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |d: String| Error::format(path, format!("line {}: {d}", i + 1));
        let j: EventJson = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let mode = match j.mode.as_str() {
            "none" => PruneMode::None,
            "staged" => PruneMode::Staged,
            "eager" => PruneMode::Eager,
            m => return Err(bad(format!("unknown mode {m:?}"))),
        };
        let kind = match j.kind.as_str() {
            "threshold" => DecisionKind::Threshold,
            "staged" => DecisionKind::Staged,
            "force" => DecisionKind::Force,
            k => return Err(bad(format!("unknown kind {k:?}"))),
        };
        out.push(PruneEvent {
            step: j.step,
            layer: j.layer,
            mode,
            window: j.window,
            kind,
            beta: j.beta,
            survivors_before: j.survivors_before,
            dropped: j.dropped,
            shares: j.shares,
            clamped: j.clamped,
        });
    }
    Ok(out)
}
