//! Dense/sparse numeric core with reverse-mode differentiation.
//!
//! Everything downstream differentiates through [`Tape`]: a flat list of
//! nodes in construction order, each holding its value and, after
//! [`Tape::backward`], the gradient of the loss with respect to it. Kernels
//! fix their per-output reduction order, so repeated runs with the same
//! inputs are bit-identical on a given platform; parallelism is only ever
//! over disjoint output rows.

mod dense;
mod fdcheck;
mod optim;
mod rng;
mod sparse;
mod tape;

pub use dense::{matmul, DenseMatrix};
pub(crate) use dense::{matmul_nt, matmul_tn};
pub use fdcheck::finite_diff_check;
pub use optim::{adam_step, AdamConfig, ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use sparse::SparseMatrix;
pub use tape::{row_softmax_values, sigmoid_scalar, NodeId, Tape};

use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Error, Debug)]
pub enum TensorError {
    #[error("shape mismatch in {op}: left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("{op}: dimension {value} out of range for a {rows}x{cols} matrix")]
    IndexOutOfRange {
        op: &'static str,
        value: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}
