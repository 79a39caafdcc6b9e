//! Dense tensors, tape autodiff, optimizers, schedules, precision emulation
//! and the tensor container format.

pub mod container;
pub mod fd;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod precision;
pub mod schedule;
pub mod tensor;
pub mod value;

pub use container::{load_checkpoint, read_tensor_file, save_checkpoint, write_tensor_file};
pub use fd::{check_graph_gradient, finite_difference_check, finite_difference_check_at, FdReport};
pub use graph::{BlockFn, Gradients, Graph, Var};
pub use optim::{adamw_step, AdamWConfig, OptimizerState, ParamMap, SgdMomentum};
pub use precision::{quantize_to_half, HalfReport, OpKind, PrecisionMode, PrecisionPolicy};
pub use schedule::cosine_lr;
pub use tensor::{ActivationMeter, FloatType, Tensor};
pub use value::{DType, TensorData, TensorValue};
