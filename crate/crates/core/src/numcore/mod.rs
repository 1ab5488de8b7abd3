//! Dense float64 tensors, a reverse-mode tape, Adam and learning-rate schedules.

pub mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod params;
mod schedule;
mod tensor;

pub use graph::{Gradients, Graph, ParamGrads, Var};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use schedule::LrSchedule;
pub use tensor::Tensor;

pub(crate) use kernels::log_softmax_row;
