//! Referring expression segmentation with per-region query prototypes,
//! covering expressions that select one, several or no objects.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. Everything here is a pure function of parameters and inputs: the
//! small reverse-mode autodiff engine, region-grid geometry, the toy encoders,
//! the query generator, the mixed modal decoder, the regional supervision
//! head, losses, metrics, the synthetic shape-world dataset, and AdamW.
//! File formats, the CLI and training orchestration live in the `gres` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod config;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod float;
pub mod geometry;
pub mod graph;
pub mod kmeans;
pub mod loss;
pub mod metrics;
pub mod mmd;
pub mod model;
pub mod nn;
pub mod optim;
pub mod qgen;
pub mod rsh;
pub mod synth;
pub mod tensor;

pub use config::{AblationVariant, DecoderKind, HeadKind, ModelConfig, QueryInit};
pub use error::{Error, Result};
pub use float::Float;
pub use geometry::{BinaryMask, QuerySet, RegionGrid};
pub use graph::{Graph, NodeId};
pub use model::{ForwardOutput, Model};
pub use tensor::Tensor;
