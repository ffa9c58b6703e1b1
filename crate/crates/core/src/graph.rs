//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as
//! borrowed leaves (no copy), every primitive appends one node holding its
//! output value and enough context to compute its adjoint, and
//! [`Graph::backward`] walks the nodes in exact reverse order of recording.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_a_bt, matmul_at_b, softmax_in_place, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Value<'p> {
    Borrowed(&'p Tensor),
    Owned(Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }
}

enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Normalized input per element, and 1/std per row.
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaskedSoftmax {
        x: Var,
        mask: Vec<bool>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    PickColumn {
        x: Var,
        rows: Vec<usize>,
        col: usize,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    ScatterRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    MeanPoolGroups {
        x: Var,
        group: usize,
    },
    BroadcastGroups {
        x: Var,
        group: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    RowMeanDot {
        x: Var,
        weights: Vec<f64>,
    },
    SumAll(Var),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
}

/// Recorded forward computation (the gradient tape).
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: BTreeMap<usize, Var>,
}

/// Parameter gradients produced by [`Graph::backward`], keyed by parameter id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    by_param: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for a parameter, or `None` if it did not influence the output.
    pub fn get(&self, param: usize) -> Option<&Tensor> {
        self.by_param.get(&param)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_finite(&self) -> bool {
        self.by_param.values().all(Tensor::is_finite)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers parameter `id`. Registering the same id twice returns the
    /// existing leaf, so each parameter appears once per forward pass.
    pub fn param(&mut self, id: usize, value: &'p Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x[m,n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = tx.dims2("add_bias")?;
        if tb.shape() != [n] {
            return Err(Error::dim("add_bias", format!("bias {:?} for {n} columns", tb.shape())));
        }
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % n];
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    /// `x·W + b` for a weight of shape `[in, out]`.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, weight)?;
        self.add_bias(h, bias)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(out, Op::Scale(x, c))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            let x = *v;
            let t = libm::tanh(GELU_C * (x + GELU_A * x * x * x));
            *v = 0.5 * x * (1.0 + t);
        }
        self.push(out, Op::Gelu(x))
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = tx.dims2("layer_norm")?;
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(Error::dim("layer_norm", "gamma/beta must match the row width"));
        }
        let mut out = Tensor::zeros(&[m, n]);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            rstd[i] = r;
            let o = out.row_mut(i);
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                o[j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Row-wise softmax over the columns where `mask` is true; masked
    /// columns are excluded from the normalization and come out exactly 0.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2("masked_softmax")?;
        if mask.len() != n {
            return Err(Error::dim("masked_softmax", format!("mask of {} for {n} columns", mask.len())));
        }
        let active: Vec<usize> = (0..n).filter(|&j| mask[j]).collect();
        if active.is_empty() {
            return Err(Error::Invariant("softmax over an empty active set".into()));
        }
        let mut out = Tensor::zeros(&[m, n]);
        let mut buf = vec![0.0; active.len()];
        for i in 0..m {
            let row = tx.row(i);
            for (b, &j) in buf.iter_mut().zip(&active) {
                *b = row[j];
            }
            softmax_in_place(&mut buf);
            let o = out.row_mut(i);
            for (&b, &j) in buf.iter().zip(&active) {
                o[j] = b;
            }
        }
        Ok(self.push(
            out,
            Op::MaskedSoftmax {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::dim("gather_rows", format!("row {r} of {m}")));
            }
            data.extend_from_slice(tx.row(r));
        }
        let out = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Vector `[x[rows[0], col], x[rows[1], col], ...]`.
    pub fn pick_column(&mut self, x: Var, rows: &[usize], col: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2("pick_column")?;
        if col >= n || rows.iter().any(|&r| r >= m) {
            return Err(Error::dim("pick_column", "index out of range"));
        }
        let data = rows.iter().map(|&r| tx.data()[r * n + col]).collect();
        Ok(self.push(
            Tensor::vector(data),
            Op::PickColumn {
                x,
                rows: rows.to_vec(),
                col,
            },
        ))
    }

    /// `x[m,n] * s[m]` with `s` broadcast along each row.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let (m, _) = tx.dims2("scale_rows")?;
        if ts.shape() != [m] {
            return Err(Error::dim("scale_rows", format!("scale {:?} for {m} rows", ts.shape())));
        }
        let mut out = tx.clone();
        for i in 0..m {
            let c = ts.data()[i];
            out.row_mut(i).iter_mut().for_each(|v| *v *= c);
        }
        Ok(self.push(out, Op::ScaleRows { x, s }))
    }

    /// Assembles a `[rows, width]` matrix from parts placed at the given row
    /// indices. Uncovered rows are zero; each row may be covered at most once.
    pub fn scatter_rows(&mut self, rows: usize, width: usize, parts: Vec<(Var, Vec<usize>)>) -> Result<Var> {
        let mut out = Tensor::zeros(&[rows, width]);
        let mut seen = vec![false; rows];
        for (part, idx) in &parts {
            let tp = self.value(*part);
            let (pm, pn) = tp.dims2("scatter_rows")?;
            if pm != idx.len() || pn != width {
                return Err(Error::dim("scatter_rows", "part shape does not match its index list"));
            }
            for (k, &r) in idx.iter().enumerate() {
                if r >= rows || seen[r] {
                    return Err(Error::dim("scatter_rows", format!("row {r} out of range or repeated")));
                }
                seen[r] = true;
                out.row_mut(r).copy_from_slice(tp.row(k));
            }
        }
        Ok(self.push(out, Op::ScatterRows { parts }))
    }

    /// Mean over consecutive groups of `group` rows: `[g*group, n] -> [g, n]`.
    pub fn mean_pool_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2("mean_pool_groups")?;
        if group == 0 || m % group != 0 {
            return Err(Error::dim("mean_pool_groups", format!("{m} rows in groups of {group}")));
        }
        let g = m / group;
        let mut out = Tensor::zeros(&[g, n]);
        let inv = 1.0 / group as f64;
        for s in 0..g {
            let o = out.row_mut(s);
            for t in 0..group {
                for (ov, xv) in o.iter_mut().zip(tx.row(s * group + t)) {
                    *ov += xv;
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(self.push(out, Op::MeanPoolGroups { x, group }))
    }

    /// Repeats each row `group` times: `[g, n] -> [g*group, n]`.
    pub fn broadcast_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        let (g, n) = tx.dims2("broadcast_groups")?;
        let mut out = Tensor::zeros(&[g * group, n]);
        for s in 0..g {
            for t in 0..group {
                out.row_mut(s * group + t).copy_from_slice(tx.row(s));
            }
        }
        Ok(self.push(out, Op::BroadcastGroups { x, group }))
    }

    /// Scaled dot-product attention within each sequence of `seq_len`
    /// consecutive rows, with the hidden width split into `heads` slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        same_shape("attention", tq, tk)?;
        same_shape("attention", tq, tv)?;
        let (m, h) = tq.dims2("attention")?;
        if seq_len == 0 || m % seq_len != 0 || heads == 0 || h % heads != 0 {
            return Err(Error::dim("attention", format!("{m} rows, width {h}, seq {seq_len}, heads {heads}")));
        }
        let dh = h / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let nseq = m / seq_len;
        let mut probs = vec![0.0; nseq * heads * seq_len * seq_len];
        let mut out = Tensor::zeros(&[m, h]);
        for s in 0..nseq {
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let base = (s * heads + hd) * seq_len * seq_len;
                for i in 0..seq_len {
                    let qi = &tq.row(s * seq_len + i)[cols.clone()];
                    let p = &mut probs[base + i * seq_len..base + (i + 1) * seq_len];
                    for (j, pj) in p.iter_mut().enumerate() {
                        *pj = dot(qi, &tk.row(s * seq_len + j)[cols.clone()]) * scale;
                    }
                    softmax_in_place(p);
                    let o = &mut out.row_mut(s * seq_len + i)[cols.clone()];
                    for (j, &pj) in p.iter().enumerate() {
                        for (ov, vv) in o.iter_mut().zip(&tv.row(s * seq_len + j)[cols.clone()]) {
                            *ov += pj * vv;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
        ))
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (m, c) = tl.dims2("cross_entropy")?;
        if targets.len() != m || targets.iter().any(|&t| t >= c) {
            return Err(Error::dim("cross_entropy", "targets do not match logits"));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &tl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            loss += lse - row[t];
            softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        let out = Tensor::scalar(loss / m as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// `sum_j weights[j] * mean_i x[i, j]` as a scalar.
    pub fn row_mean_dot(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2("row_mean_dot")?;
        if weights.len() != n || m == 0 {
            return Err(Error::dim("row_mean_dot", "weights must match columns"));
        }
        let mut total = 0.0;
        for j in 0..n {
            let col: f64 = (0..m).map(|i| tx.data()[i * n + j]).sum();
            total += weights[j] * col / m as f64;
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::RowMeanDot {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll(x))
    }

    /// Back-propagates from the scalar `loss` and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", "loss must be a single value"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = node.value.get();
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    out.by_param.insert(*id, g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = ta.dims2("matmul")?;
                    let (_, n) = tb.dims2("matmul")?;
                    let mut ga = Tensor::zeros(&[m, k]);
                    matmul_a_bt(g.data(), tb.data(), ga.data_mut(), m, k, n);
                    let mut gb = Tensor::zeros(&[k, n]);
                    matmul_at_b(ta.data(), g.data(), gb.data_mut(), m, k, n);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = zip_map(&g, tb, |gv, bv| gv * bv);
                    let gb = zip_map(&g, ta, |gv, av| gv * av);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(x, b) => {
                    let n = self.value(*b).len();
                    let mut gb = Tensor::zeros(&[n]);
                    for (i, gv) in g.data().iter().enumerate() {
                        gb.data_mut()[i % n] += gv;
                    }
                    accumulate(&mut grads, *x, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(x, c) => {
                    let mut gx = g;
                    gx.data_mut().iter_mut().for_each(|v| *v *= c);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let gx = zip_map(&g, self.value(*x), |gv, x| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = libm::tanh(u);
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let tg = self.value(*gamma);
                    let (m, n) = g.dims2("layer_norm")?;
                    let mut gx = Tensor::zeros(&[m, n]);
                    let mut ggamma = Tensor::zeros(&[n]);
                    let mut gbeta = Tensor::zeros(&[n]);
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let grow = g.row(i);
                        let xh = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            ggamma.data_mut()[j] += grow[j] * xh[j];
                            gbeta.data_mut()[j] += grow[j];
                            dxhat[j] = grow[j] * tg.data()[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dot(&dxhat, xh) / n as f64;
                        let r = rstd[i];
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, ggamma);
                    accumulate(&mut grads, *beta, gbeta);
                }
                Op::MaskedSoftmax { x, mask } => {
                    let (m, n) = val.dims2("masked_softmax")?;
                    let mut gx = Tensor::zeros(&[m, n]);
                    for i in 0..m {
                        let y = val.row(i);
                        let gy = g.row(i);
                        let inner: f64 = (0..n).filter(|&j| mask[j]).map(|j| y[j] * gy[j]).sum();
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            if mask[j] {
                                *o = y[j] * (gy[j] - inner);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GatherRows { x, rows } => {
                    let tx = self.value(*x);
                    let mut gx = Tensor::zeros(tx.shape());
                    for (k, &r) in rows.iter().enumerate() {
                        for (o, gv) in gx.row_mut(r).iter_mut().zip(g.row(k)) {
                            *o += gv;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::PickColumn { x, rows, col } => {
                    let tx = self.value(*x);
                    let (_, n) = tx.dims2("pick_column")?;
                    let mut gx = Tensor::zeros(tx.shape());
                    for (k, &r) in rows.iter().enumerate() {
                        gx.data_mut()[r * n + col] += g.data()[k];
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ScaleRows { x, s } => {
                    let (tx, ts) = (self.value(*x), self.value(*s));
                    let (m, _) = tx.dims2("scale_rows")?;
                    let mut gx = g.clone();
                    let mut gs = Tensor::zeros(&[m]);
                    for i in 0..m {
                        let c = ts.data()[i];
                        gx.row_mut(i).iter_mut().for_each(|v| *v *= c);
                        gs.data_mut()[i] = dot(g.row(i), tx.row(i));
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *s, gs);
                }
                Op::ScatterRows { parts } => {
                    for (part, idx) in parts {
                        let width = g.shape()[1];
                        let mut data = Vec::with_capacity(idx.len() * width);
                        for &r in idx {
                            data.extend_from_slice(g.row(r));
                        }
                        accumulate(&mut grads, *part, Tensor::new(vec![idx.len(), width], data)?);
                    }
                }
                Op::MeanPoolGroups { x, group } => {
                    let tx = self.value(*x);
                    let mut gx = Tensor::zeros(tx.shape());
                    let inv = 1.0 / *group as f64;
                    let rows = tx.shape()[0];
                    for r in 0..rows {
                        let src = g.row(r / group);
                        for (o, gv) in gx.row_mut(r).iter_mut().zip(src) {
                            *o = gv * inv;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::BroadcastGroups { x, group } => {
                    let tx = self.value(*x);
                    let mut gx = Tensor::zeros(tx.shape());
                    for r in 0..g.shape()[0] {
                        let dst = gx.row_mut(r / group);
                        for (o, gv) in dst.iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    seq_len,
                    heads,
                    probs,
                } => {
                    let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (m, h) = tq.dims2("attention")?;
                    let (l, nh) = (*seq_len, *heads);
                    let dh = h / nh;
                    let scale = 1.0 / libm::sqrt(dh as f64);
                    let mut gq = Tensor::zeros(&[m, h]);
                    let mut gk = Tensor::zeros(&[m, h]);
                    let mut gv = Tensor::zeros(&[m, h]);
                    let mut dp = vec![0.0; l];
                    for s in 0..m / l {
                        for hd in 0..nh {
                            let cols = hd * dh..(hd + 1) * dh;
                            let base = (s * nh + hd) * l * l;
                            for i in 0..l {
                                let p = &probs[base + i * l..base + (i + 1) * l];
                                let go = &g.row(s * l + i)[cols.clone()];
                                for j in 0..l {
                                    dp[j] = dot(go, &tv.row(s * l + j)[cols.clone()]);
                                    for (o, gov) in gv.row_mut(s * l + j)[cols.clone()].iter_mut().zip(go) {
                                        *o += p[j] * gov;
                                    }
                                }
                                let inner = dot(p, &dp);
                                for j in 0..l {
                                    let ds = p[j] * (dp[j] - inner) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let kj = &tk.row(s * l + j)[cols.clone()];
                                    for (o, kv) in gq.row_mut(s * l + i)[cols.clone()].iter_mut().zip(kj) {
                                        *o += ds * kv;
                                    }
                                    let qi = &tq.row(s * l + i)[cols.clone()];
                                    for (o, qv) in gk.row_mut(s * l + j)[cols.clone()].iter_mut().zip(qi) {
                                        *o += ds * qv;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let tl = self.value(*logits);
                    let (m, c) = tl.dims2("cross_entropy")?;
                    let scale = g.item() / m as f64;
                    let mut gl = Tensor::new(vec![m, c], probs.clone())?;
                    for (i, &t) in targets.iter().enumerate() {
                        gl.data_mut()[i * c + t] -= 1.0;
                    }
                    gl.data_mut().iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut grads, *logits, gl);
                }
                Op::RowMeanDot { x, weights } => {
                    let tx = self.value(*x);
                    let (m, n) = tx.dims2("row_mean_dot")?;
                    let c = g.item() / m as f64;
                    let mut gx = Tensor::zeros(&[m, n]);
                    for i in 0..m {
                        for (o, w) in gx.row_mut(i).iter_mut().zip(weights) {
                            *o = w * c;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumAll(x) => {
                    let tx = self.value(*x);
                    accumulate(&mut grads, *x, Tensor::full(tx.shape(), g.item()));
                }
            }
        }
        Ok(out)
    }
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(a, b)| f(*a, *b)).collect();
    Tensor::new(g.shape().to_vec(), data).expect("shapes checked at record time")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
