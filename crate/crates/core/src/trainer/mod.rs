//! Two-stage training with the memory-saving machinery: gradient cache,
//! block checkpointing, sharded optimizer state and precision policies.

pub mod config;
pub mod memory;
pub mod run;
pub mod step;
pub mod zero;

pub use config::{LossKind, ScheduleConfig, TrainConfig};
pub use memory::{measure_step_memory, MemoryReport};
pub use run::{
    initial_state, load_model, load_train_state, phases, run_two_stage_training, save_model, save_train_state, Phase,
    TrainOutcome, TrainingData,
};
pub use step::{
    compute_gradients, gradient_cache_step, learning_rate, monolithic_gradients, train_step, GradOutput, StepMetrics,
    StepOptions, TrainBatch, TrainState,
};
pub use zero::{zero_shard_update, ShardBalance, ZeroSim};
