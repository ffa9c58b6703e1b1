//! A small pre-norm encoder whose feed-forward sublayers are either dense
//! or mixture-of-experts, with a pooled classification head.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::moe::{FeedForward, GateResult, Linear, MoeLayer, ParamId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    /// Multi-head scaled dot-product self-attention within each sequence.
    Attention,
    /// Each token receives a projection of its sequence's mean.
    MeanPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub hidden_size: usize,
    pub ffn_inner: usize,
    pub num_heads: usize,
    pub num_experts: usize,
    /// Blocks whose FFN is an MoE layer.
    pub moe_blocks: Vec<usize>,
    pub input_dim: usize,
    pub num_classes: usize,
    pub balance_loss_weight: f64,
    pub mixer: MixerKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            hidden_size: 32,
            ffn_inner: 64,
            num_heads: 1,
            num_experts: 8,
            moe_blocks: vec![1, 3],
            input_dim: 16,
            num_classes: 2,
            balance_loss_weight: 1e-2,
            mixer: MixerKind::Attention,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("num_blocks", self.num_blocks),
            ("hidden_size", self.hidden_size),
            ("ffn_inner", self.ffn_inner),
            ("num_heads", self.num_heads),
            ("num_experts", self.num_experts),
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        let mut seen = vec![false; self.num_blocks];
        for &b in &self.moe_blocks {
            if b >= self.num_blocks || core::mem::replace(&mut seen[b], true) {
                return Err(Error::Config(format!("moe block index {b} is out of range or repeated")));
            }
        }
        if !(self.balance_loss_weight >= 0.0 && self.balance_loss_weight.is_finite()) {
            return Err(Error::Config("balance_loss_weight must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// The same architecture with every FFN dense.
    pub fn dense_counterpart(&self) -> Self {
        Self {
            moe_blocks: Vec::new(),
            ..self.clone()
        }
    }

    pub fn is_moe_block(&self, block: usize) -> bool {
        self.moe_blocks.contains(&block)
    }

    /// Equal up to the training-only balance loss weight.
    pub fn same_architecture(&self, other: &Self) -> bool {
        let strip = |c: &Self| Self {
            balance_loss_weight: 0.0,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

/// Named parameter tensors in a fixed registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: String, value: Tensor) -> ParamId {
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn element_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    fn forward<'p>(&self, g: &mut Graph<'p>, params: &'p [Tensor], x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma.0, &params[self.gamma.0]);
        let beta = g.param(self.beta.0, &params[self.beta.0]);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mixer {
    Attention {
        query: Linear,
        key: Linear,
        value: Linear,
        output: Linear,
    },
    MeanPool {
        proj: Linear,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum FfnSublayer {
    Dense(FeedForward),
    Moe(MoeLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: Norm,
    pub mixer: Mixer,
    pub norm2: Norm,
    pub ffn: FfnSublayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    embed: Linear,
    blocks: Vec<Block>,
    final_norm: Norm,
    head: Linear,
}

/// Output of a recorded forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    /// `[sequences, num_classes]`
    pub logits: Var,
    /// Balance losses of every MoE layer, summed and scaled by the configured
    /// weight. `None` when the model has no MoE layer or the weight is 0.
    pub aux_loss: Option<Var>,
    /// One per MoE layer in block order.
    pub gates: Vec<GateResult>,
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Supplies parameter tensors while the block structure is being laid out.
trait Source {
    fn take(&mut self, name: String, shape: &[usize], init: Init) -> Result<ParamId>;
}

struct Fresh {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Source for Fresh {
    fn take(&mut self, name: String, shape: &[usize], init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|_| Error::Config("bad init scale".into()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
        };
        Ok(self.store.push(name, Tensor::new(shape.to_vec(), data)?))
    }
}

/// Pulls tensors by (possibly remapped) name out of an existing set.
struct Named<'a> {
    tensors: BTreeMap<String, &'a Tensor>,
    rename: &'a dyn Fn(&str) -> String,
    store: ParamStore,
}

impl Source for Named<'_> {
    fn take(&mut self, name: String, shape: &[usize], _init: Init) -> Result<ParamId> {
        let source_name = (self.rename)(&name);
        let t = self
            .tensors
            .get(&source_name)
            .ok_or_else(|| Error::Config(format!("missing parameter {source_name}")))?;
        if t.shape() != shape {
            return Err(Error::Config(format!(
                "parameter {source_name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(self.store.push(name, (*t).clone()))
    }
}

fn linear(src: &mut dyn Source, prefix: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
    let std = 1.0 / libm::sqrt(fan_in as f64);
    Ok(Linear {
        weight: src.take(format!("{prefix}.weight"), &[fan_in, fan_out], Init::Normal(std))?,
        bias: src.take(format!("{prefix}.bias"), &[fan_out], Init::Zeros)?,
    })
}

fn norm(src: &mut dyn Source, prefix: &str, width: usize) -> Result<Norm> {
    Ok(Norm {
        gamma: src.take(format!("{prefix}.gamma"), &[width], Init::Ones)?,
        beta: src.take(format!("{prefix}.beta"), &[width], Init::Zeros)?,
    })
}

fn feed_forward(src: &mut dyn Source, prefix: &str, hidden: usize, inner: usize) -> Result<FeedForward> {
    Ok(FeedForward {
        up: linear(src, &format!("{prefix}.up"), hidden, inner)?,
        down: linear(src, &format!("{prefix}.down"), inner, hidden)?,
    })
}

struct Layout {
    embed: Linear,
    blocks: Vec<Block>,
    final_norm: Norm,
    head: Linear,
}

fn lay_out(config: &ModelConfig, src: &mut dyn Source) -> Result<Layout> {
    let h = config.hidden_size;
    let embed = linear(src, "embed", config.input_dim, h)?;
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for b in 0..config.num_blocks {
        let p = format!("blocks.{b}");
        let norm1 = norm(src, &format!("{p}.norm1"), h)?;
        let mixer = match config.mixer {
            MixerKind::Attention => Mixer::Attention {
                query: linear(src, &format!("{p}.attn.query"), h, h)?,
                key: linear(src, &format!("{p}.attn.key"), h, h)?,
                value: linear(src, &format!("{p}.attn.value"), h, h)?,
                output: linear(src, &format!("{p}.attn.output"), h, h)?,
            },
            MixerKind::MeanPool => Mixer::MeanPool {
                proj: linear(src, &format!("{p}.mix.proj"), h, h)?,
            },
        };
        let norm2 = norm(src, &format!("{p}.norm2"), h)?;
        let ffn = if config.is_moe_block(b) {
            let e = config.num_experts;
            let router = src.take(format!("{p}.moe.router"), &[h, e], Init::Normal(1.0 / libm::sqrt(h as f64)))?;
            let experts = (0..e)
                .map(|i| feed_forward(src, &format!("{p}.moe.experts.{i}"), h, config.ffn_inner))
                .collect::<Result<_>>()?;
            FfnSublayer::Moe(MoeLayer {
                router,
                experts,
                active: vec![true; e],
            })
        } else {
            FfnSublayer::Dense(feed_forward(src, &format!("{p}.ffn"), h, config.ffn_inner)?)
        };
        blocks.push(Block {
            norm1,
            mixer,
            norm2,
            ffn,
        });
    }
    let final_norm = norm(src, "final_norm", h)?;
    let head = linear(src, "head", h, config.num_classes)?;
    Ok(Layout {
        embed,
        blocks,
        final_norm,
        head,
    })
}

impl Model {
    /// Random initialization, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut src = Fresh {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::default(),
        };
        let layout = lay_out(&config, &mut src)?;
        Ok(Self::assemble(config, src.store, layout))
    }

    /// Rebuilds a model from named tensors (e.g. a checkpoint). Every
    /// parameter the config implies must be present with the right shape.
    pub fn from_named<'a>(config: ModelConfig, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Self> {
        config.validate()?;
        let identity = |n: &str| String::from(n);
        let mut src = Named {
            tensors: tensors.into_iter().map(|(n, t)| (String::from(n), t)).collect(),
            rename: &identity,
            store: ParamStore::default(),
        };
        let layout = lay_out(&config, &mut src)?;
        if src.store.len() != src.tensors.len() {
            return Err(Error::Config(format!(
                "{} tensors supplied, config implies {}",
                src.tensors.len(),
                src.store.len()
            )));
        }
        Ok(Self::assemble(config, src.store, layout))
    }

    fn assemble(config: ModelConfig, params: ParamStore, layout: Layout) -> Self {
        Self {
            config,
            params,
            embed: layout.embed,
            blocks: layout.blocks,
            final_norm: layout.final_norm,
            head: layout.head,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Changes the auxiliary loss weight; the architecture is unaffected.
    pub fn set_balance_loss_weight(&mut self, weight: f64) -> Result<()> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::Config(format!("balance_loss_weight must be finite and non-negative, got {weight}")));
        }
        self.config.balance_loss_weight = weight;
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn parameter_count(&self) -> usize {
        self.params.element_count()
    }

    /// MoE layers in block order.
    pub fn moe_layers(&self) -> impl Iterator<Item = &MoeLayer> {
        self.blocks.iter().filter_map(|b| match &b.ffn {
            FfnSublayer::Moe(m) => Some(m),
            FfnSublayer::Dense(_) => None,
        })
    }

    pub fn moe_layer(&self, layer: usize) -> Option<&MoeLayer> {
        self.moe_layers().nth(layer)
    }

    fn moe_layer_mut(&mut self, layer: usize) -> Option<&mut MoeLayer> {
        self.blocks
            .iter_mut()
            .filter_map(|b| match &mut b.ffn {
                FfnSublayer::Moe(m) => Some(m),
                FfnSublayer::Dense(_) => None,
            })
            .nth(layer)
    }

    pub fn num_moe_layers(&self) -> usize {
        self.moe_layers().count()
    }

    pub fn active_masks(&self) -> Vec<Vec<bool>> {
        self.moe_layers().map(|m| m.active.clone()).collect()
    }

    pub fn set_active(&mut self, layer: usize, mask: &[bool]) -> Result<()> {
        self.moe_layer_mut(layer)
            .ok_or_else(|| Error::Config(format!("no MoE layer {layer}")))?
            .set_active(mask)
    }

    /// Per-parameter flag: true for every parameter of an inactive expert.
    pub fn frozen_params(&self) -> Vec<bool> {
        let mut frozen = vec![false; self.params.len()];
        for layer in self.moe_layers() {
            for (expert, &on) in layer.experts.iter().zip(&layer.active) {
                if !on {
                    for p in expert.params() {
                        frozen[p.0] = true;
                    }
                }
            }
        }
        frozen
    }

    /// Rewrites every MoE layer into a dense FFN holding its sole surviving
    /// expert. Routers and dropped experts are removed.
    pub fn collapse(&self) -> Result<Model> {
        let mut survivor: BTreeMap<usize, usize> = BTreeMap::new();
        for (b, block) in self.blocks.iter().enumerate() {
            if let FfnSublayer::Moe(layer) = &block.ffn {
                let dense = layer.collapse_to_dense()?;
                let e = layer.experts.iter().position(|x| *x == dense).expect("survivor is one of the experts");
                survivor.insert(b, e);
            }
        }
        let rename = move |name: &str| -> String {
            for (b, e) in &survivor {
                let dense = format!("blocks.{b}.ffn.");
                if let Some(rest) = name.strip_prefix(dense.as_str()) {
                    return format!("blocks.{b}.moe.experts.{e}.{rest}");
                }
            }
            String::from(name)
        };
        let config = self.config.dense_counterpart();
        let mut src = Named {
            tensors: self.params.iter().map(|(n, t)| (String::from(n), t)).collect(),
            rename: &rename,
            store: ParamStore::default(),
        };
        let layout = lay_out(&config, &mut src)?;
        Ok(Self::assemble(config, src.store, layout))
    }

    /// Forward pass with this model's own parameters.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, features: &Tensor) -> Result<ForwardOutput> {
        self.forward_with(self.params.values(), g, features)
    }

    /// Forward pass reading parameter values from `params` (same layout as
    /// this model's store). Lets a gradient checker perturb copies.
    pub fn forward_with<'p>(&self, params: &'p [Tensor], g: &mut Graph<'p>, features: &Tensor) -> Result<ForwardOutput> {
        let (seqs, tokens, dim) = match features.shape() {
            [s, t, d] => (*s, *t, *d),
            other => return Err(Error::dim("model_forward", format!("features must be [seq, tok, dim], got {other:?}"))),
        };
        if dim != self.config.input_dim || seqs == 0 || tokens == 0 {
            return Err(Error::dim(
                "model_forward",
                format!("feature dim {dim} vs configured {}", self.config.input_dim),
            ));
        }
        let x = g.constant(features.clone().reshape(&[seqs * tokens, dim])?);
        let mut h = self.embed.forward(g, params, x)?;
        let mut gates = Vec::new();
        let mut balance: Option<Var> = None;

        for block in &self.blocks {
            let z = block.norm1.forward(g, params, h)?;
            let mixed = match &block.mixer {
                Mixer::Attention {
                    query,
                    key,
                    value,
                    output,
                } => {
                    let q = query.forward(g, params, z)?;
                    let k = key.forward(g, params, z)?;
                    let v = value.forward(g, params, z)?;
                    let a = g.attention(q, k, v, tokens, self.config.num_heads)?;
                    output.forward(g, params, a)?
                }
                Mixer::MeanPool { proj } => {
                    let pooled = g.mean_pool_groups(z, tokens)?;
                    let spread = g.broadcast_groups(pooled, tokens)?;
                    proj.forward(g, params, spread)?
                }
            };
            h = g.add(h, mixed)?;

            let z = block.norm2.forward(g, params, h)?;
            let y = match &block.ffn {
                FfnSublayer::Dense(ffn) => ffn.forward(g, params, z)?,
                FfnSublayer::Moe(layer) => {
                    let (vars, gate) = layer.forward(g, params, z)?;
                    gates.push(gate);
                    balance = Some(match balance {
                        Some(acc) => g.add(acc, vars.balance_loss)?,
                        None => vars.balance_loss,
                    });
                    vars.output
                }
            };
            h = g.add(h, y)?;
        }

        let h = self.final_norm.forward(g, params, h)?;
        let pooled = g.mean_pool_groups(h, tokens)?;
        let logits = self.head.forward(g, params, pooled)?;
        let weight = self.config.balance_loss_weight;
        let aux_loss = match balance {
            Some(b) if weight > 0.0 => Some(g.scale(b, weight)),
            _ => None,
        };
        Ok(ForwardOutput {
            logits,
            aux_loss,
            gates,
        })
    }

    /// Task cross-entropy plus the weighted auxiliary loss.
    pub fn loss_with<'p>(&self, params: &'p [Tensor], g: &mut Graph<'p>, batch: &Batch) -> Result<(Var, ForwardOutput)> {
        let out = self.forward_with(params, g, &batch.features)?;
        let task = g.cross_entropy(out.logits, &batch.labels)?;
        let loss = match out.aux_loss {
            Some(aux) => g.add(task, aux)?,
            None => task,
        };
        Ok((loss, out))
    }

    /// Forward-only logits `[sequences, classes]`.
    pub fn predict(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, features)?;
        Ok(g.value(out.logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_blocks: 2,
            hidden_size: 8,
            ffn_inner: 12,
            num_heads: 2,
            num_experts: 4,
            moe_blocks: vec![1],
            input_dim: 5,
            num_classes: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn validation() {
        assert!(tiny().validate().is_ok());
        let bad = ModelConfig {
            moe_blocks: vec![2],
            ..tiny()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig {
            num_experts: 0,
            ..tiny()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            num_heads: 3,
            ..tiny()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(tiny(), 1).unwrap();
        let b = Model::init(tiny(), 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Model::init(tiny(), 2).unwrap());
    }

    #[test]
    fn named_round_trip() {
        let a = Model::init(tiny(), 3).unwrap();
        let b = Model::from_named(tiny(), a.params().iter()).unwrap();
        assert_eq!(a.params(), b.params());
        let wrong = ModelConfig {
            num_experts: 3,
            ..tiny()
        };
        assert!(Model::from_named(wrong, a.params().iter()).is_err());
    }

    #[test]
    fn frozen_follow_masks() {
        let mut m = Model::init(tiny(), 4).unwrap();
        assert!(m.frozen_params().iter().all(|f| !f));
        m.set_active(0, &[true, false, true, true]).unwrap();
        let frozen = m.frozen_params();
        let ids = m.moe_layer(0).unwrap().experts[1].params();
        for (i, f) in frozen.iter().enumerate() {
            assert_eq!(*f, ids.iter().any(|p| p.0 == i));
        }
    }

    #[test]
    fn collapse_shrinks_to_dense_layout() {
        let mut m = Model::init(tiny(), 5).unwrap();
        assert!(m.collapse().is_err());
        m.set_active(0, &[false, false, true, false]).unwrap();
        let c = m.collapse().unwrap();
        assert!(c.config().moe_blocks.is_empty());
        assert_eq!(c.num_moe_layers(), 0);
        let expert = m.moe_layer(0).unwrap().experts[2].parameter_count(m.params().values());
        let router = m.params().get(m.moe_layer(0).unwrap().router).len();
        assert_eq!(m.parameter_count() - c.parameter_count(), 3 * expert + router);
    }

    #[test]
    fn bad_feature_shape() {
        let m = Model::init(tiny(), 6).unwrap();
        assert!(m.predict(&Tensor::zeros(&[2, 3, 4])).is_err());
        assert!(m.predict(&Tensor::zeros(&[6, 5])).is_err());
    }
}
