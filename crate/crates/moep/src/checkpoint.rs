//! Binary checkpoint format.
//!
//! ```text
//! "MOEP" | u32 version | u64 header length | header (TOML)
//! body:    u32 record count, then per record:
//!          u32 name length | name | u32 rank | u64 extent * rank | f64 * len
//! trailer: u64 CRC-64 of the body
//! ```
//!
//! All integers and floats are little-endian. Records hold parameters
//! (`param/…`), Adam moments (`adam.m/…`, `adam.v/…`) and the current
//! window's ledger (`ledger.alpha/…`, `ledger.hits/…`).

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};
use moep_core::data::{DataSource, DataStream, TaskConfig, TaskSpec};
use moep_core::model::{Model, ModelConfig};
use moep_core::optim::{Adam, AdamConfig};
use moep_core::prune::{LayerLedger, Ledger, PruneConfig, ScheduleState};
use moep_core::train::{RunMetrics, Trainer};
use moep_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MOEP";
pub const VERSION: u32 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

/// TOML integers are signed 64-bit, so seeds travel as hex strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamHeader {
    source: DataSource,
    seed: String,
    batch_size: usize,
    pool_batches: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    step: u64,
    model: ModelConfig,
    task: TaskConfig,
    stream: StreamHeader,
    optimizer: AdamConfig,
    adam_steps: Vec<u64>,
    prune: PruneConfig,
    ledger_tokens: Vec<u64>,
    schedule: ScheduleState,
}

/// Everything needed to resume a run bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub stream: DataStream,
    pub optimizer: AdamConfig,
    pub adam_steps: Vec<u64>,
    pub prune: PruneConfig,
    pub schedule: ScheduleState,
    pub ledger: Ledger,
    pub params: Vec<(String, Tensor)>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            step: t.step,
            model: t.model.config().clone(),
            task: t.task.config().clone(),
            stream: t.stream.clone(),
            optimizer: t.optimizer.config.clone(),
            adam_steps: t.optimizer.t.clone(),
            prune: t.prune.clone(),
            schedule: t.schedule.clone(),
            ledger: t.ledger.clone(),
            params: t.model.params().iter().map(|(n, v)| (n.to_string(), v.clone())).collect(),
            adam_m: t.optimizer.m.clone(),
            adam_v: t.optimizer.v.clone(),
        }
    }

    /// The model with the schedule's masks applied.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::from_named(self.model.clone(), self.params.iter().map(|(n, t)| (n.as_str(), t)))?;
        for (layer, mask) in self.schedule.masks().iter().enumerate() {
            model.set_active(layer, mask)?;
        }
        Ok(model)
    }

    pub fn to_trainer(&self) -> Result<Trainer> {
        let model = self.to_model()?;
        let n = model.params().len();
        if self.adam_m.len() != n || self.adam_v.len() != n || self.adam_steps.len() != n {
            return Err(Error::Config("optimizer state does not match the parameter list".into()));
        }
        Ok(Trainer {
            model,
            task: TaskSpec::new(self.task.clone())?,
            stream: self.stream.clone(),
            optimizer: Adam {
                config: self.optimizer.clone(),
                m: self.adam_m.clone(),
                v: self.adam_v.clone(),
                t: self.adam_steps.clone(),
            },
            prune: self.prune.clone(),
            schedule: self.schedule.clone(),
            ledger: self.ledger.clone(),
            step: self.step,
            metrics: RunMetrics::default(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            step: self.step,
            model: self.model.clone(),
            task: self.task.clone(),
            stream: StreamHeader {
                source: self.stream.source,
                seed: format!("{:016x}", self.stream.seed),
                batch_size: self.stream.batch_size,
                pool_batches: self.stream.pool_batches,
            },
            optimizer: self.optimizer.clone(),
            adam_steps: self.adam_steps.clone(),
            prune: self.prune.clone(),
            ledger_tokens: self.ledger.layers().iter().map(|l| l.token_count).collect(),
            schedule: self.schedule.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Config(format!("header: {e}")))?;

        let mut records: Vec<(String, &Tensor)> = Vec::new();
        for (name, t) in &self.params {
            records.push((format!("param/{name}"), t));
        }
        for ((name, _), m) in self.params.iter().zip(&self.adam_m) {
            records.push((format!("adam.m/{name}"), m));
        }
        for ((name, _), v) in self.params.iter().zip(&self.adam_v) {
            records.push((format!("adam.v/{name}"), v));
        }
        let ledger: Vec<(Tensor, Tensor)> = self
            .ledger
            .layers()
            .iter()
            .map(|l| {
                (
                    Tensor::vector(l.alpha_sum.clone()),
                    Tensor::vector(l.hit_count.iter().map(|&h| h as f64).collect()),
                )
            })
            .collect();
        for (i, (alpha, hits)) in ledger.iter().enumerate() {
            records.push((format!("ledger.alpha/{i}"), alpha));
            records.push((format!("ledger.hits/{i}"), hits));
        }

        let mut body = Vec::new();
        body.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            body.extend_from_slice(&(name.len() as u32).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                body.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                body.extend_from_slice(&x.to_le_bytes());
            }
        }

        let mut out = Vec::with_capacity(16 + text.len() + body.len() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&body);
        out.extend_from_slice(&CRC64.checksum(&body).to_le_bytes());
        Ok(out)
    }

    /// Parses a checkpoint; `origin` only labels error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::format(origin, detail);
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated magic"))? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated version"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let header_len = r.u64().ok_or_else(|| bad("truncated header length"))? as usize;
        let text = r.take(header_len).ok_or_else(|| bad("truncated header"))?;
        let text = std::str::from_utf8(text).map_err(|_| bad("header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| bad(&format!("header: {e}")))?;

        let body_start = r.pos;
        if bytes.len() < body_start + 8 {
            return Err(bad("truncated body"));
        }
        let body = &bytes[body_start..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        if CRC64.checksum(body) != stored {
            return Err(bad("checksum mismatch"));
        }

        let mut r = Reader { bytes: body, pos: 0 };
        let count = r.u32().ok_or_else(|| bad("truncated record count"))?;
        let mut params = Vec::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        let mut alpha = Vec::new();
        let mut hits = Vec::new();
        for _ in 0..count {
            let (name, tensor) = r.record().ok_or_else(|| bad("truncated or malformed record"))?;
            let (kind, rest) = name.split_once('/').ok_or_else(|| bad(&format!("record name {name:?}")))?;
            match kind {
                "param" => params.push((rest.to_string(), tensor)),
                "adam.m" => adam_m.push(tensor),
                "adam.v" => adam_v.push(tensor),
                "ledger.alpha" => alpha.push(tensor),
                "ledger.hits" => hits.push(tensor),
                _ => return Err(bad(&format!("unknown record kind {kind:?}"))),
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after records"));
        }
        if alpha.len() != hits.len() || alpha.len() != header.ledger_tokens.len() {
            return Err(bad("ledger records do not match the header"));
        }
        let ledger = Ledger::from_layers(
            alpha
                .into_iter()
                .zip(hits)
                .zip(&header.ledger_tokens)
                .map(|((a, h), &token_count)| LayerLedger {
                    alpha_sum: a.into_data(),
                    hit_count: h.data().iter().map(|&x| x as u64).collect(),
                    token_count,
                })
                .collect(),
        );
        let seed = u64::from_str_radix(&header.stream.seed, 16).map_err(|_| bad("stream seed is not hex"))?;
        Ok(Self {
            step: header.step,
            model: header.model,
            task: header.task,
            stream: DataStream {
                source: header.stream.source,
                seed,
                batch_size: header.stream.batch_size,
                pool_batches: header.stream.pool_batches,
            },
            optimizer: header.optimizer,
            adam_steps: header.adam_steps,
            prune: header.prune,
            schedule: header.schedule,
            ledger,
            params,
            adam_m,
            adam_v,
        })
    }

    /// Writes via a temporary sibling and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(Error::io(&tmp))?;
        fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and rejects a checkpoint built for a different model.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if !ckpt.model.same_architecture(expected) {
            return Err(Error::Config(format!(
                "{}: checkpoint model config differs from the requested one",
                path.display()
            )));
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn record(&mut self) -> Option<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).ok()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Option<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
        let raw = self.take(n.checked_mul(8)?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Some((name, Tensor::new(shape, data).ok()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use moep_core::train::{pretrainer, TrainConfig};

    fn small_trainer() -> Trainer {
        let config = ModelConfig {
            num_blocks: 2,
            hidden_size: 8,
            ffn_inner: 8,
            num_experts: 4,
            moe_blocks: vec![1],
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            steps: 12,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut t = pretrainer(config, TaskSpec::new(TaskConfig::default()).unwrap(), &train, 3).unwrap();
        t.run_until(5).unwrap();
        t
    }

    #[test]
    fn bytes_round_trip() {
        let ckpt = Checkpoint::from_trainer(&small_trainer());
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = Checkpoint::from_trainer(&small_trainer()).to_bytes().unwrap();
        let mut flipped = bytes.clone();
        let i = flipped.len() - 20;
        flipped[i] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped, Path::new("x")), Err(Error::Format { .. })));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2], Path::new("x")).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE", Path::new("x")).is_err());
    }

    #[test]
    fn large_seed_survives() {
        let mut ckpt = Checkpoint::from_trainer(&small_trainer());
        ckpt.stream.seed = u64::MAX - 3;
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap(), Path::new("m")).unwrap();
        assert_eq!(back.stream.seed, u64::MAX - 3);
    }

    #[test]
    fn expecting_ignores_balance_weight_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.moep");
        let t = small_trainer();
        Checkpoint::from_trainer(&t).save(&path).unwrap();
        let mut expected = t.model.config().clone();
        expected.balance_loss_weight = 0.0;
        assert!(Checkpoint::load_expecting(&path, &expected).is_ok());
        expected.num_experts = 2;
        assert!(Checkpoint::load_expecting(&path, &expected).is_err());
    }
}
