//! Activation-scalar accounting for one gradient computation.

use serde::{Deserialize, Serialize};

use super::step::{compute_gradients, StepOptions, TrainBatch};
use crate::encoders::TwoTowerParams;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub batch_size: usize,
    pub chunk_size: usize,
    /// Peak live activation scalars without checkpointing.
    pub plain: usize,
    /// Same step with every transformer block checkpointed.
    pub checkpointed: usize,
}

impl MemoryReport {
    /// Fraction of the plain peak saved by checkpointing.
    pub fn reduction(&self) -> f64 {
        if self.plain == 0 {
            return 0.0;
        }
        1.0 - self.checkpointed as f64 / self.plain as f64
    }
}

/// Runs the step's gradient computation twice, with and without block
/// checkpointing, and reports both peaks.
pub fn measure_step_memory(params: &TwoTowerParams, batch: &TrainBatch, opts: &StepOptions) -> Result<MemoryReport> {
    let plain = compute_gradients(params, batch, &StepOptions { checkpoint_blocks: false, ..*opts })?;
    let ck = compute_gradients(params, batch, &StepOptions { checkpoint_blocks: true, ..*opts })?;
    Ok(MemoryReport {
        batch_size: batch.len(),
        chunk_size: opts.chunk_size.min(batch.len()),
        plain: plain.peak_activation_scalars,
        checkpointed: ck.peak_activation_scalars,
    })
}
