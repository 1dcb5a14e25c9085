//! Task-aware layer-wise distillation at desk scale.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors with reverse-mode autodiff and freeze flags
//! - [`data`]: deterministic toy corpora and batching
//! - [`model`]: a minimal causal transformer with per-layer hidden states
//! - [`checkpoint`]: the versioned binary parameter container
//! - [`filters`]: task-aware filters and the filter-training objective
//! - [`distill`]: distillation losses, layer mapping, combined objective
//! - [`optim`]: AdamW with a linear warmup/decay schedule
//! - [`trainer`]: the training loops, evaluation, and resumable state
//! - [`config`]: experiment configuration files
//! - [`pipeline`]: run-directory orchestration behind the CLI commands

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod filters;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
