//! Deterministic, differentiable numeric primitives.
//!
//! Everything is plain row-major `Vec`-backed tensors plus an eager
//! reverse-mode tape ([`Graph`]). Training runs at `f32`; the gradient
//! checker requires `f64` because central differences at single precision
//! are too noisy for a 1e-4 tolerance.

mod gradcheck;
mod graph;
mod rng;
mod store;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, GRADCHECK_EPS};
pub use graph::{Graph, Var, MASK_NEG};
pub use rng::{fnv1a, Rng};
pub use store::{adam_step, Adam, Param, ParamStore, ADAM_BETAS, ADAM_EPS};
pub use tensor::{cross_entropy, layer_norm, relu, softmax_rows, Scalar, Tensor1, Tensor2};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("tensor data length {got} does not match shape {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, got: usize },
    #[error("{context}: non-finite value encountered")]
    NonFinite { context: String },
    #[error("cross entropy: no positions to score after ignoring id {ignore:?}")]
    EmptyTarget { ignore: Option<usize> },
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("parameter {0:?} already registered")]
    DuplicateParam(String),
    #[error("{op}: index {index} out of range for {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
