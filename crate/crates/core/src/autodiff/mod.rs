//! Minimal reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Tape`] records every forward operation as a node; [`Tape::backward`]
//! replays the nodes in reverse and accumulates vector-Jacobian products.
//! Tensors are dense row-major f64 arrays. Two ops make the rest of the crate
//! possible: `stop_gradient` (identity forward, blocks all gradient flow) and
//! `grad_reverse` (identity forward, multiplies the incoming gradient by
//! `-lambda`), used respectively by the two-stream fusion and the adversarial
//! baseline.
//!
//! Tapes are built fresh for every training step and confined to one thread;
//! distinct tapes may run in parallel. Dropout masks are produced by the
//! caller from seeded streams — the tape owns no randomness.

mod check;
mod tape;
mod tensor;

pub use check::{finite_diff_check, FdReport};
pub use tape::{GradientMap, NodeId, OpKind, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: left {lhs:?}, right {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("unknown op kind `{0}`")]
    UnknownKind(String),
    #[error("{op} expects {expected} inputs, got {got}")]
    BadArity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward requires a scalar loss of shape [1], got {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor is not on this tape (node id {0} out of range)")]
    ForeignNode(usize),
    #[error("tensor has no tape node; record it with Tape::leaf first")]
    Detached,
    #[error("shape {shape:?} does not match {len} values")]
    ShapeValueMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced while evaluating {context}")]
    NonFinite { context: String },
}

pub type Result<T> = std::result::Result<T, AdError>;
