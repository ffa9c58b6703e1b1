//! Expert proficiency accounting and the window-based dropping schedule.
//!
//! During each training window every MoE layer accumulates, per expert, the
//! gate mass it received (`alpha_sum`) and the number of tokens it won
//! (`hit_count`). At a window boundary the accumulators are turned into
//! shares that sum to 1 over the surviving experts and compared against the
//! dynamic threshold `beta / Z`, where `Z` is the current survivor count.
//!
//! Modes:
//! - `Eager`: drop every survivor whose share is strictly below the
//!   threshold, always keeping the top-share expert.
//! - `Staged`: drop the single lowest-share survivor per window.
//! - `None`: accumulate and report, never drop.
//!
//! With `force_drop` enabled, the first boundary at or after step
//! `floor(N / 2)` keeps only the top-share expert of every layer that still
//! has more than one survivor.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::GateResult;
use crate::tensor::{argmax, argmin};

/// Slack on `share < T` so float noise at exact ties (e.g. uniform shares
/// computed as `a / (Z * a)`) counts as equality, which survives.
pub const SHARE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLedger {
    pub alpha_sum: Vec<f64>,
    pub hit_count: Vec<u64>,
    pub token_count: u64,
}

impl LayerLedger {
    fn new(experts: usize) -> Self {
        Self {
            alpha_sum: vec![0.0; experts],
            hit_count: vec![0; experts],
            token_count: 0,
        }
    }

    fn reset(&mut self) {
        self.alpha_sum.iter_mut().for_each(|a| *a = 0.0);
        self.hit_count.iter_mut().for_each(|h| *h = 0);
        self.token_count = 0;
    }
}

/// Per-layer proficiency accumulators for the current window.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Ledger {
    layers: Vec<LayerLedger>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Accumulated gate values (soft hit rate).
    Alpha,
    /// Fraction of tokens routed to the expert.
    HitRate,
}

impl Ledger {
    pub fn new(layers: usize, experts: usize) -> Self {
        Self {
            layers: (0..layers).map(|_| LayerLedger::new(experts)).collect(),
        }
    }

    pub fn from_layers(layers: Vec<LayerLedger>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[LayerLedger] {
        &self.layers
    }

    /// Adds one batch of gate results, one per MoE layer.
    pub fn accumulate(&mut self, gates: &[GateResult]) -> Result<()> {
        if gates.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "{} gate results for {} ledger layers",
                gates.len(),
                self.layers.len()
            )));
        }
        for (layer, gate) in self.layers.iter_mut().zip(gates) {
            let e = layer.alpha_sum.len();
            if gate.num_experts() != e {
                return Err(Error::Config(format!("gate over {} experts, ledger has {e}", gate.num_experts())));
            }
            for t in 0..gate.num_tokens() {
                for (acc, a) in layer.alpha_sum.iter_mut().zip(gate.alphas.row(t)) {
                    *acc += a;
                }
                layer.hit_count[gate.top1[t]] += 1;
            }
            layer.token_count += gate.num_tokens() as u64;
        }
        Ok(())
    }

    /// Normalized proficiency shares of one layer. `None` for an empty window.
    pub fn window_shares(&self, layer: usize, criterion: Criterion, active: &[bool]) -> Option<Vec<f64>> {
        let l = &self.layers[layer];
        if l.token_count == 0 {
            return None;
        }
        let raw: Vec<f64> = match criterion {
            Criterion::Alpha => l.alpha_sum.clone(),
            Criterion::HitRate => l.hit_count.iter().map(|&h| h as f64).collect(),
        };
        let total: f64 = raw.iter().zip(active).filter(|(_, on)| **on).map(|(v, _)| v).sum();
        if total <= 0.0 {
            return None;
        }
        Some(
            raw.iter()
                .zip(active)
                .map(|(v, &on)| if on { v / total } else { 0.0 })
                .collect(),
        )
    }

    pub fn reset(&mut self) {
        self.layers.iter_mut().for_each(LayerLedger::reset);
    }
}

/// Dropping threshold `beta / Z`.
pub fn threshold(beta: f64, survivors: usize) -> f64 {
    beta / survivors as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    None,
    Staged,
    Eager,
}

impl PruneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneMode::None => "none",
            PruneMode::Staged => "staged",
            PruneMode::Eager => "eager",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub mode: PruneMode,
    pub criterion: Criterion,
    pub beta: f64,
    /// Window length as a multiple of `N / E`.
    pub gamma: f64,
    pub total_steps: u64,
    pub num_experts: usize,
    /// Keep only the top-share expert at the half-schedule boundary.
    pub force_drop: bool,
}

impl PruneConfig {
    pub fn new(mode: PruneMode, total_steps: u64, num_experts: usize) -> Self {
        Self {
            mode,
            criterion: Criterion::Alpha,
            beta: 1.0,
            gamma: 1.0,
            total_steps,
            num_experts,
            force_drop: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.total_steps == 0 || self.num_experts == 0 {
            return Err(Error::Config("total_steps and num_experts must be at least 1".into()));
        }
        Ok(())
    }

    /// `max(1, round(gamma * N / E))`.
    pub fn window_length(&self) -> u64 {
        let l = libm::round(self.gamma * self.total_steps as f64 / self.num_experts as f64);
        if l < 1.0 {
            1
        } else {
            l as u64
        }
    }

    /// `floor(N / 2)`, never earlier than the first step.
    pub fn force_drop_step(&self) -> u64 {
        (self.total_steps / 2).max(1)
    }

    /// Whether a decision happens after `step` completed optimizer steps.
    pub fn is_boundary(&self, step: u64) -> bool {
        step > 0
            && (step % self.window_length() == 0
                || (self.force_drop && self.mode != PruneMode::None && step == self.force_drop_step()))
    }

    fn forces_at(&self, step: u64) -> bool {
        self.force_drop && self.mode != PruneMode::None && step >= self.force_drop_step()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Threshold,
    Staged,
    Force,
}

/// One decision on one layer that was not yet finalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub step: u64,
    pub layer: usize,
    pub mode: PruneMode,
    pub window: u64,
    pub kind: DecisionKind,
    pub beta: f64,
    pub survivors_before: Vec<usize>,
    pub dropped: Vec<usize>,
    pub shares: Vec<f64>,
    /// The top-share expert was kept only because of the safety clamp.
    pub clamped: bool,
}

/// What happened to one layer at one window boundary (including layers
/// that are already finalized or had an empty window).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    pub step: u64,
    pub window: u64,
    pub layer: usize,
    pub shares: Option<Vec<f64>>,
    pub hits: Vec<u64>,
    pub survivors_before: Vec<usize>,
    pub survivors_after: Vec<usize>,
    pub event: Option<PruneEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSchedule {
    pub survivors: Vec<bool>,
    pub finalized: bool,
    /// Shares from the most recent non-empty window.
    pub last_shares: Option<Vec<f64>>,
}

impl LayerSchedule {
    fn from_mask(mask: &[bool]) -> Self {
        Self {
            survivors: mask.to_vec(),
            finalized: mask.iter().filter(|a| **a).count() == 1,
            last_shares: None,
        }
    }

    pub fn survivor_ids(&self) -> Vec<usize> {
        (0..self.survivors.len()).filter(|&i| self.survivors[i]).collect()
    }

    pub fn count(&self) -> usize {
        self.survivors.iter().filter(|a| **a).count()
    }

    fn drop_experts(&mut self, dropped: &[usize]) {
        for &e in dropped {
            self.survivors[e] = false;
        }
        debug_assert!(self.count() >= 1);
        self.finalized = self.count() == 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    /// Number of window boundaries processed so far.
    pub window: u64,
    pub layers: Vec<LayerSchedule>,
    pub events: Vec<PruneEvent>,
    pub clamp_activations: u64,
}

impl ScheduleState {
    /// Starts from the given active masks (usually all true).
    pub fn new(masks: &[Vec<bool>]) -> Result<Self> {
        if masks.iter().any(|m| !m.iter().any(|a| *a)) {
            return Err(Error::Invariant("survivor set may not start empty".into()));
        }
        Ok(Self {
            window: 0,
            layers: masks.iter().map(|m| LayerSchedule::from_mask(m)).collect(),
            events: Vec::new(),
            clamp_activations: 0,
        })
    }

    pub fn masks(&self) -> Vec<Vec<bool>> {
        self.layers.iter().map(|l| l.survivors.clone()).collect()
    }

    pub fn all_finalized(&self) -> bool {
        self.layers.iter().all(|l| l.finalized)
    }
}

/// Active experts whose share is strictly below `t`, plus whether the
/// top-share expert had to be rescued by the clamp.
fn eager_drops(shares: &[f64], survivors: &[bool], t: f64) -> (Vec<usize>, bool) {
    let keep = top_survivor(shares, survivors);
    let mut dropped = Vec::new();
    let mut clamped = false;
    for (i, (&s, &on)) in shares.iter().zip(survivors).enumerate() {
        if on && s < t - SHARE_TOLERANCE {
            if i == keep {
                clamped = true;
            } else {
                dropped.push(i);
            }
        }
    }
    (dropped, clamped)
}

fn top_survivor(shares: &[f64], survivors: &[bool]) -> usize {
    let masked: Vec<f64> = shares
        .iter()
        .zip(survivors)
        .map(|(&s, &on)| if on { s } else { f64::NEG_INFINITY })
        .collect();
    argmax(&masked).unwrap_or(0)
}

fn bottom_survivor(shares: &[f64], survivors: &[bool]) -> usize {
    let masked: Vec<f64> = shares
        .iter()
        .zip(survivors)
        .map(|(&s, &on)| if on { s } else { f64::INFINITY })
        .collect();
    argmin(&masked).unwrap_or(0)
}

/// Eager rule on one layer. Returns the dropped experts.
pub fn prune_eager(layer: &mut LayerSchedule, shares: &[f64], t: f64) -> Vec<usize> {
    prune_eager_clamped(layer, shares, t).0
}

fn prune_eager_clamped(layer: &mut LayerSchedule, shares: &[f64], t: f64) -> (Vec<usize>, bool) {
    let (dropped, clamped) = eager_drops(shares, &layer.survivors, t);
    layer.drop_experts(&dropped);
    (dropped, clamped)
}

/// Staged rule on one layer: drop the lowest-share survivor (ties to the
/// lowest index). No-op when a single survivor remains.
pub fn prune_staged(layer: &mut LayerSchedule, shares: &[f64]) -> Option<usize> {
    if layer.count() <= 1 {
        return None;
    }
    let worst = bottom_survivor(shares, &layer.survivors);
    layer.drop_experts(&[worst]);
    Some(worst)
}

/// Keeps only the top-share survivor (ties to the lowest index) and
/// finalizes the layer.
pub fn force_drop(layer: &mut LayerSchedule, shares: &[f64]) -> Vec<usize> {
    if layer.finalized {
        return Vec::new();
    }
    let keep = top_survivor(shares, &layer.survivors);
    let dropped: Vec<usize> = layer.survivor_ids().into_iter().filter(|&e| e != keep).collect();
    layer.drop_experts(&dropped);
    dropped
}

/// Pure decision function: given the survivor set before the decision,
/// which experts does `kind` drop, and was the clamp needed.
pub fn decide(kind: DecisionKind, shares: &[f64], survivors: &[bool], beta: f64) -> (Vec<usize>, bool) {
    let mut layer = LayerSchedule::from_mask(survivors);
    layer.finalized = layer.count() == 1;
    match kind {
        DecisionKind::Threshold => {
            let t = threshold(beta, layer.count());
            prune_eager_clamped(&mut layer, shares, t)
        }
        DecisionKind::Staged => (prune_staged(&mut layer, shares).into_iter().collect(), false),
        DecisionKind::Force => (force_drop(&mut layer, shares), false),
    }
}

/// Processes a window boundary after `step` completed optimizer steps:
/// computes shares, applies the mode's rule to every unfinalized layer,
/// logs events and resets the ledger.
pub fn on_window_end(state: &mut ScheduleState, ledger: &mut Ledger, config: &PruneConfig, step: u64) -> Result<Vec<WindowRecord>> {
    if ledger.layers().len() != state.layers.len() {
        return Err(Error::Config("ledger and schedule disagree on layer count".into()));
    }
    let forcing = config.forces_at(step);
    let mut records = Vec::with_capacity(state.layers.len());
    for (li, layer) in state.layers.iter_mut().enumerate() {
        let before = layer.survivor_ids();
        let shares = ledger.window_shares(li, config.criterion, &layer.survivors);
        if let Some(s) = &shares {
            layer.last_shares = Some(s.clone());
        }
        let mut event = None;
        if config.mode != PruneMode::None && !layer.finalized {
            let kind = if forcing {
                Some(DecisionKind::Force)
            } else if shares.is_none() {
                None
            } else if config.mode == PruneMode::Eager {
                Some(DecisionKind::Threshold)
            } else {
                Some(DecisionKind::Staged)
            };
            // A forced decision on an empty window falls back to the last
            // observed shares, then to the lowest surviving index.
            let basis = shares.clone().or_else(|| layer.last_shares.clone()).unwrap_or_else(|| {
                let mut s = vec![0.0; layer.survivors.len()];
                if let Some(&first) = before.first() {
                    s[first] = 1.0;
                }
                s
            });
            if let Some(kind) = kind {
                let (dropped, clamped) = match kind {
                    DecisionKind::Threshold => {
                        let t = threshold(config.beta, layer.count());
                        prune_eager_clamped(layer, &basis, t)
                    }
                    DecisionKind::Staged => (prune_staged(layer, &basis).into_iter().collect(), false),
                    DecisionKind::Force => (force_drop(layer, &basis), false),
                };
                if clamped {
                    state.clamp_activations += 1;
                }
                let e = PruneEvent {
                    step,
                    layer: li,
                    mode: config.mode,
                    window: state.window,
                    kind,
                    beta: config.beta,
                    survivors_before: before.clone(),
                    dropped,
                    shares: basis,
                    clamped,
                };
                state.events.push(e.clone());
                event = Some(e);
            }
        }
        records.push(WindowRecord {
            step,
            window: state.window,
            layer: li,
            shares,
            hits: ledger.layers()[li].hit_count.clone(),
            survivors_before: before,
            survivors_after: layer.survivor_ids(),
            event,
        });
    }
    state.window += 1;
    ledger.reset();
    Ok(records)
}

/// Replays an event log from the initial masks; returns the drops each
/// event would make. Equal to the logged drops when decisions are pure.
pub fn replay(initial: &[Vec<bool>], events: &[PruneEvent]) -> Vec<Vec<usize>> {
    let mut masks: Vec<Vec<bool>> = initial.to_vec();
    events
        .iter()
        .map(|e| {
            let (dropped, _) = decide(e.kind, &e.shares, &masks[e.layer], e.beta);
            for &d in &dropped {
                masks[e.layer][d] = false;
            }
            dropped
        })
        .collect()
}
