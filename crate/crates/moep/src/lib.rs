//! Run orchestration, file formats, benchmarking and reporting on top of
//! `moep-core`.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod svg;

pub use error::{Error, Result};
