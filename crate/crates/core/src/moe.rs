//! Switch-style mixture-of-experts feed-forward layer with top-1 routing.
//!
//! Gate values are a softmax of the router logits taken over the *active*
//! experts only, so masked experts get exactly zero mass and a layer with a
//! single survivor routes every token to it with gate value 1.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{argmax, Tensor};

/// Index into a model's parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<'p>(&self, g: &mut Graph<'p>, params: &'p [Tensor], x: Var) -> Result<Var> {
        let w = g.param(self.weight.0, &params[self.weight.0]);
        let b = g.param(self.bias.0, &params[self.bias.0]);
        g.affine(x, w, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Two affine maps with a GELU in between: `hidden -> inner -> hidden`.
/// Used both as an expert and as a plain dense FFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward<'p>(&self, g: &mut Graph<'p>, params: &'p [Tensor], x: Var) -> Result<Var> {
        let h = self.up.forward(g, params, x)?;
        let h = g.gelu(h);
        self.down.forward(g, params, h)
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.up.weight, self.up.bias, self.down.weight, self.down.bias]
    }

    pub fn parameter_count(&self, params: &[Tensor]) -> usize {
        self.params().iter().map(|p| params[p.0].len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    /// Router weight `[hidden, E]`; keeps all `E` columns while experts are masked.
    pub router: ParamId,
    pub experts: Vec<FeedForward>,
    pub active: Vec<bool>,
}

/// Forward-only routing record of one MoE layer for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GateResult {
    /// `[tokens, E]`, exactly zero at masked experts.
    pub alphas: Tensor,
    /// Chosen expert per token (argmax of the masked alphas).
    pub top1: Vec<usize>,
    pub balance_loss: f64,
}

impl GateResult {
    pub fn num_tokens(&self) -> usize {
        self.top1.len()
    }

    pub fn num_experts(&self) -> usize {
        self.alphas.shape().get(1).copied().unwrap_or(0)
    }
}

/// Graph handles produced by [`MoeLayer::forward`].
#[derive(Debug, Clone, Copy)]
pub struct MoeVars {
    pub output: Var,
    pub alphas: Var,
    pub balance_loss: Var,
}

impl MoeLayer {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn survivors(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&i| self.active[i]).collect()
    }

    pub fn set_active(&mut self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.experts.len() {
            return Err(Error::dim("set_active", format!("mask of {} for {} experts", mask.len(), self.experts.len())));
        }
        if !mask.iter().any(|a| *a) {
            return Err(Error::Invariant("an MoE layer needs at least one active expert".into()));
        }
        self.active = mask.to_vec();
        Ok(())
    }

    /// Records the gate: router logits for all experts, softmax over the
    /// active ones. Returns the alphas node and its forward-only summary.
    pub fn gate<'p>(&self, g: &mut Graph<'p>, params: &'p [Tensor], x: Var) -> Result<(Var, GateResult)> {
        if self.num_active() == 0 {
            return Err(Error::Invariant("gate called on a layer with every expert masked".into()));
        }
        let w = g.param(self.router.0, &params[self.router.0]);
        let logits = g.matmul(x, w)?;
        let alphas = g.masked_softmax(logits, &self.active)?;
        let values = g.value(alphas).clone();
        let tokens = values.shape()[0];
        let top1 = (0..tokens)
            .map(|t| masked_argmax(values.row(t), &self.active))
            .collect();
        let mut result = GateResult {
            alphas: values,
            top1,
            balance_loss: 0.0,
        };
        result.balance_loss = balance_loss(&result, self.num_active());
        Ok((alphas, result))
    }

    /// Top-1 routed forward: each token gets `alpha_top1 * Exp_top1(x)`,
    /// and only the selected expert runs on it.
    pub fn forward<'p>(&self, g: &mut Graph<'p>, params: &'p [Tensor], x: Var) -> Result<(MoeVars, GateResult)> {
        let (tokens, width) = g.value(x).dims2("moe_forward")?;
        let (alphas, gate) = self.gate(g, params, x)?;

        let mut routed: Vec<Vec<usize>> = vec![Vec::new(); self.experts.len()];
        for (t, &e) in gate.top1.iter().enumerate() {
            routed[e].push(t);
        }
        let mut parts = Vec::new();
        for (e, rows) in routed.into_iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let sub = g.gather_rows(x, &rows)?;
            let h = self.experts[e].forward(g, params, sub)?;
            let a = g.pick_column(alphas, &rows, e)?;
            let y = g.scale_rows(h, a)?;
            parts.push((y, rows));
        }
        let output = g.scatter_rows(tokens, width, parts)?;

        let weights = balance_weights(&gate, &self.active);
        let balance_loss = g.row_mean_dot(alphas, &weights)?;
        Ok((
            MoeVars {
                output,
                alphas,
                balance_loss,
            },
            gate,
        ))
    }

    /// Forward-only gate on plain tensors.
    pub fn gate_values(&self, params: &[Tensor], x: &Tensor) -> Result<GateResult> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        Ok(self.gate(&mut g, params, xv)?.1)
    }

    /// Forward-only layer output on plain tensors.
    pub fn forward_values(&self, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (vars, _) = self.forward(&mut g, params, xv)?;
        Ok(g.value(vars.output).clone())
    }

    /// The dense FFN holding the sole surviving expert; the router is dropped.
    pub fn collapse_to_dense(&self) -> Result<FeedForward> {
        match self.survivors().as_slice() {
            [only] => Ok(self.experts[*only]),
            many => Err(Error::Precondition(format!(
                "collapse needs exactly one active expert, found {}",
                many.len()
            ))),
        }
    }
}

fn masked_argmax(row: &[f64], active: &[bool]) -> usize {
    let masked: Vec<f64> = row
        .iter()
        .zip(active)
        .map(|(&a, &on)| if on { a } else { f64::NEG_INFINITY })
        .collect();
    argmax(&masked).unwrap_or(0)
}

/// Per-expert weights `Z * f_i` so that `sum_i w_i * mean_t alpha[t, i]`
/// is the balance loss; `f` is treated as a constant.
fn balance_weights(gate: &GateResult, active: &[bool]) -> Vec<f64> {
    let z = active.iter().filter(|a| **a).count() as f64;
    let tokens = gate.num_tokens().max(1) as f64;
    let mut w = vec![0.0; active.len()];
    for &e in &gate.top1 {
        w[e] += 1.0;
    }
    for (wi, &on) in w.iter_mut().zip(active) {
        *wi = if on { z * *wi / tokens } else { 0.0 };
    }
    w
}

/// Switch-style auxiliary loss `Z * sum_i f_i * P_i` over the active experts,
/// where `f_i` is the fraction of tokens routed to `i` and `P_i` its mean gate value.
pub fn balance_loss(gate: &GateResult, num_active: usize) -> f64 {
    let tokens = gate.num_tokens();
    if tokens == 0 {
        return 0.0;
    }
    let experts = gate.num_experts();
    let mut counts = vec![0usize; experts];
    for &e in &gate.top1 {
        counts[e] += 1;
    }
    let mut total = 0.0;
    for (i, &count) in counts.iter().enumerate() {
        let f = count as f64 / tokens as f64;
        let p = (0..tokens).map(|t| gate.alphas.data()[t * experts + i]).sum::<f64>() / tokens as f64;
        total += f * p;
    }
    num_active as f64 * total
}
