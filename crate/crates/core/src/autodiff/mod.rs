//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Enough to express MLPs, graph propagation and gradient reversal. A
//! [`Tape`] records each forward op; [`Tape::backward`] replays it in reverse.

mod optim;
mod tape;
mod tensor;

pub use optim::Sgd;
pub use tape::{softmax_rows, Elementwise, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;

/// Floor applied to probabilities before taking a log.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected length {expected}, got {got}")]
    LengthMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("log of non-positive value {0}")]
    NonPositiveLog(f64),
    #[error("binary operation is missing its second operand")]
    MissingOperand,
    #[error("{0}")]
    InvalidArgument(String),
}
