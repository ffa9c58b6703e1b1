//! Synthetic clustered sequence-classification tasks.
//!
//! Each subtask owns a cluster center; a sequence from subtask `k` is a set of
//! tokens `center_k + noise_scale * z_t` with `z_t ~ N(0, I)`. Its label is the
//! angular sector of the mean noise `mean_t z_t` projected onto a subtask-specific
//! plane, so every subtask is learnable but needs a different function.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Knobs for a task family; everything else is derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub num_subtasks: usize,
    pub feature_dim: usize,
    pub tokens_per_sequence: usize,
    pub classes_per_subtask: usize,
    pub noise_scale: f64,
    /// Norm of every cluster center.
    pub center_radius: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            num_subtasks: 8,
            feature_dim: 16,
            tokens_per_sequence: 8,
            classes_per_subtask: 2,
            noise_scale: 1.0,
            center_radius: 8.0,
            seed: 17,
        }
    }
}

/// A materialized task family: cluster centers and per-subtask label planes.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    config: TaskConfig,
    /// `[K, feature_dim]`
    centers: Tensor,
    /// Orthonormal pair `(u_k, v_k)` per subtask, each of length `feature_dim`.
    planes: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[sequences, tokens, feature_dim]`
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub subtasks: Vec<usize>,
}

impl Batch {
    pub fn num_sequences(&self) -> usize {
        self.labels.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.features.shape().iter().take(2).product()
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let norm = libm::sqrt(dot(v, v));
    v.iter_mut().for_each(|x| *x /= norm);
}

impl TaskSpec {
    pub fn new(config: TaskConfig) -> Result<Self> {
        let TaskConfig {
            num_subtasks: k,
            feature_dim: f,
            tokens_per_sequence,
            classes_per_subtask,
            noise_scale,
            center_radius,
            seed,
        } = config;
        if k == 0 || f < 2 || tokens_per_sequence == 0 || classes_per_subtask < 2 {
            return Err(Error::Config(format!(
                "task needs >=1 subtask, feature_dim >=2, >=1 token, >=2 classes (got {k}, {f}, {tokens_per_sequence}, {classes_per_subtask})"
            )));
        }
        if !(noise_scale > 0.0 && noise_scale.is_finite()) || !(center_radius > 0.0) {
            return Err(Error::Config("noise_scale and center_radius must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let min_gap = 4.0 * noise_scale;
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut attempts = 0;
        while centers.len() < k {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Config(format!(
                    "cannot place {k} centers of radius {center_radius} more than {min_gap} apart"
                )));
            }
            let mut c = gaussian_vec(&mut rng, f);
            normalize(&mut c);
            c.iter_mut().for_each(|x| *x *= center_radius);
            if centers.iter().all(|o| distance(o, &c) > min_gap) {
                centers.push(c);
            }
        }
        let planes = (0..k)
            .map(|_| {
                let mut u = gaussian_vec(&mut rng, f);
                normalize(&mut u);
                let mut v = gaussian_vec(&mut rng, f);
                let proj = dot(&u, &v);
                v.iter_mut().zip(&u).for_each(|(vi, ui)| *vi -= proj * ui);
                normalize(&mut v);
                (u, v)
            })
            .collect();
        let centers = Tensor::new(vec![k, f], centers.concat())?;
        Ok(Self {
            config,
            centers,
            planes,
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn num_subtasks(&self) -> usize {
        self.config.num_subtasks
    }

    /// Label rule: angular sector of the mean noise in subtask `k`'s plane.
    pub fn label(&self, subtask: usize, mean_noise: &[f64]) -> usize {
        let (u, v) = &self.planes[subtask];
        let theta = libm::atan2(dot(v, mean_noise), dot(u, mean_noise));
        let classes = self.config.classes_per_subtask;
        let sector = ((theta + PI) / (2.0 * PI / classes as f64)) as usize;
        sector.min(classes - 1)
    }

    fn push_sequence(&self, subtask: usize, rng: &mut ChaCha8Rng, features: &mut Vec<f64>) -> usize {
        let f = self.config.feature_dim;
        let t = self.config.tokens_per_sequence;
        let center = self.centers.row(subtask);
        let mut mean = vec![0.0; f];
        for _ in 0..t {
            for (j, m) in mean.iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *m += z / t as f64;
                features.push(center[j] + self.config.noise_scale * z);
            }
        }
        self.label(subtask, &mean)
    }

    fn batch_from(&self, batch_size: usize, rng: &mut ChaCha8Rng, mut pick: impl FnMut(&mut ChaCha8Rng) -> usize) -> Batch {
        let (f, t) = (self.config.feature_dim, self.config.tokens_per_sequence);
        let mut features = Vec::with_capacity(batch_size * t * f);
        let mut labels = Vec::with_capacity(batch_size);
        let mut subtasks = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let k = pick(rng);
            labels.push(self.push_sequence(k, rng, &mut features));
            subtasks.push(k);
        }
        Batch {
            features: Tensor::new(vec![batch_size, t, f], features).expect("sized above"),
            labels,
            subtasks,
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Sequences drawn uniformly over all subtasks.
pub fn gen_pretrain_batch(spec: &TaskSpec, batch_size: usize, rng: &mut ChaCha8Rng) -> Batch {
    let k = spec.num_subtasks();
    spec.batch_from(batch_size, rng, |r| r.random_range(0..k))
}

/// Sequences from a single subtask.
pub fn gen_finetune_batch(spec: &TaskSpec, subtask: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    if subtask >= spec.num_subtasks() {
        return Err(Error::Config(format!(
            "subtask {subtask} out of range 0..{}",
            spec.num_subtasks()
        )));
    }
    Ok(spec.batch_from(batch_size, rng, |_| subtask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    Pretrain,
    Finetune { subtask: usize },
}

/// Deterministic batch stream: batch `i` is a pure function of `(seed, i)`.
///
/// With `pool_batches = Some(n)` the stream cycles over a fixed set of `n`
/// batches, i.e. a finite training set visited in epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataStream {
    pub source: DataSource,
    pub seed: u64,
    pub batch_size: usize,
    pub pool_batches: Option<usize>,
}

impl DataStream {
    pub fn batch(&self, spec: &TaskSpec, counter: u64) -> Result<Batch> {
        let index = match self.pool_batches {
            Some(n) if n > 0 => counter % n as u64,
            _ => counter,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        match self.source {
            DataSource::Pretrain => Ok(gen_pretrain_batch(spec, self.batch_size, &mut rng)),
            DataSource::Finetune { subtask } => gen_finetune_batch(spec, subtask, self.batch_size, &mut rng),
        }
    }
}

/// Seed for evaluation data that never collides with a training seed.
pub fn held_out_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

/// A materialized evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub batches: Vec<Batch>,
}

impl EvalSet {
    pub fn generate(spec: &TaskSpec, source: DataSource, seed: u64, num_batches: usize, batch_size: usize) -> Result<Self> {
        let stream = DataStream {
            source,
            seed,
            batch_size,
            pool_batches: None,
        };
        let batches = (0..num_batches as u64)
            .map(|i| stream.batch(spec, i))
            .collect::<Result<_>>()?;
        Ok(Self { batches })
    }

    pub fn num_sequences(&self) -> usize {
        self.batches.iter().map(Batch::num_sequences).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TaskSpec {
        TaskSpec::new(TaskConfig::default()).unwrap()
    }

    #[test]
    fn centers_are_separated() {
        let s = spec();
        let c = s.centers();
        for i in 0..8 {
            for j in 0..i {
                assert!(distance(c.row(i), c.row(j)) > 4.0 * s.config().noise_scale);
            }
        }
    }

    #[test]
    fn zero_noise_limit_hits_centers() {
        // noise_scale must stay positive; a tiny value bounds the deviation.
        let s = TaskSpec::new(TaskConfig {
            noise_scale: 1e-300,
            ..TaskConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = gen_finetune_batch(&s, 2, 4, &mut rng).unwrap();
        let f = s.config().feature_dim;
        for (i, v) in b.features.data().iter().enumerate() {
            assert_eq!(*v, s.centers().row(2)[i % f]);
        }
    }

    #[test]
    fn finetune_batch_is_single_subtask() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = gen_finetune_batch(&s, 0, 16, &mut rng).unwrap();
        assert!(b.subtasks.iter().all(|&k| k == 0));
        assert!(gen_finetune_batch(&s, 8, 1, &mut rng).is_err());
    }

    #[test]
    fn stream_is_pure() {
        let s = spec();
        let stream = DataStream {
            source: DataSource::Pretrain,
            seed: 9,
            batch_size: 8,
            pool_batches: None,
        };
        assert_eq!(stream.batch(&s, 5).unwrap(), stream.batch(&s, 5).unwrap());
        assert_ne!(stream.batch(&s, 5).unwrap(), stream.batch(&s, 6).unwrap());
        let pooled = DataStream {
            pool_batches: Some(3),
            ..stream.clone()
        };
        assert_eq!(pooled.batch(&s, 1).unwrap(), pooled.batch(&s, 4).unwrap());
    }

    #[test]
    fn multi_class_sectors_cover_all_labels() {
        let s = TaskSpec::new(TaskConfig {
            classes_per_subtask: 3,
            ..TaskConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = gen_pretrain_batch(&s, 600, &mut rng);
        for c in 0..3 {
            let n = b.labels.iter().filter(|&&l| l == c).count();
            assert!(n > 150, "class {c}: {n}");
        }
    }
}
