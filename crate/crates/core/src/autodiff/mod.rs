//! Minimal reverse-mode automatic differentiation over dense tensors, with
//! the Adam optimiser, a step learning-rate schedule and a binary
//! checkpoint format.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod optim;
mod tensor;

use thiserror::Error;

pub use checkpoint::{load_params, read_params, save_params, write_params, CheckpointError};
pub use graph::{Graph, Var};
pub use optim::{Adam, StepScheduler};
pub use tensor::{ParamId, ParamSet, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("graph was built in inference mode; nothing to differentiate")]
    NotRecorded,
}
