use alloc::boxed::Box;
use alloc::string::String;
use core::fmt;

use crate::prune::Ledger;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    Dimension { op: &'static str, detail: String },
    /// A NaN or infinity showed up where finite values are required.
    NonFinite { context: String },
    /// A structural invariant would be broken (e.g. a layer with no active experts).
    Invariant(String),
    /// An operation was called outside its precondition.
    Precondition(String),
    /// Inconsistent or out-of-range configuration.
    Config(String),
    /// Training produced a non-finite loss.
    Diverged(Box<Divergence>),
}

/// Diagnostic captured when a training step produces a non-finite loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub step: u64,
    pub loss: f64,
    pub ledger: Ledger,
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, detail } => write!(f, "dimension error in {op}: {detail}"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Invariant(msg) => write!(f, "invariant violation: {msg}"),
            Error::Precondition(msg) => write!(f, "precondition failed: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Diverged(d) => {
                write!(f, "training diverged at step {} (loss {}); ledger:", d.step, d.loss)?;
                for (i, layer) in d.ledger.layers().iter().enumerate() {
                    write!(
                        f,
                        " [layer {i}: tokens {}, alpha_sum {:?}, hits {:?}]",
                        layer.token_count, layer.alpha_sum, layer.hit_count
                    )?;
                }
                Ok(())
            }
        }
    }
}

impl core::error::Error for Error {}
