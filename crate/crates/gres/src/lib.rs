//! Training, evaluation, ablation and diagnostics for `gres-core` models,
//! plus the on-disk formats (datasets, checkpoints, logs).

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod train;
pub mod viz;

pub use config::RunConfig;
pub use error::{Error, Result};
