//! Sparse mixture-of-experts models with task-specific expert pruning.
//!
//! The crate is `no_std` (with `alloc`): tensors, a reverse-mode tape, the
//! MoE layer, a small transformer classifier, synthetic tasks, the pruning
//! scheduler and the training loop. File formats and the CLI live in the
//! `moep` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod moe;
pub mod optim;
pub mod prune;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use model::{MixerKind, Model, ModelConfig};
pub use prune::{Criterion, Ledger, PruneConfig, PruneMode, ScheduleState};
pub use tensor::Tensor;
