//! Dense tensors, a reverse-mode tape and a finite-difference checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use tape::{CustomBackward, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("no unmasked position to supervise")]
    NoSupervision,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape")]
    DoubleBackward,
}

#[cfg(test)]
mod tests;
