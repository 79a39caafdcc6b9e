//! Unified image-text contrastive pretraining at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, tape autodiff, AdamW, schedules, precision emulation, containers
//! - [`curation`]: dedup, size filtering, text hash-table labels, prompt augmentation, stage streams
//! - [`unicl`]: the label-aware bidirectional contrastive loss and an InfoNCE reference
//! - [`encoders`]: the two-tower model and its video inflation
//! - [`trainer`]: two-stage training with gradient cache, checkpointing and sharded optimizer state
//! - [`eval`]: zero-shot, retrieval, linear-probe, few-shot and region classification protocols

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod curation;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod trainer;
pub mod unicl;

pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
