//! Dense `f64` tensors with tape-based reverse-mode differentiation, first
//! order optimizers, a finite-difference gradient checker and the parameter
//! checkpoint container.

mod checkpoint;
mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{gradcheck, GradReport, ParamReport};
pub use optim::{Adam, AdamConfig, Sgd};
pub use tape::{Tape, Var, MASK_VALUE};
pub use tensor::Tensor;

pub(crate) use tape::log_sum_exp;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape")]
    TapeConsumed,
    #[error("no contributing positions in loss")]
    EmptyLoss,
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
