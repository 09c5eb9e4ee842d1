//! Minimal reverse-mode differentiable numerics.
//!
//! Arrays live on a [`Tape`] as an ordered list of operation records; a
//! single reverse sweep from a scalar loss fills gradients for every
//! trainable leaf it reaches. Broadcasting is limited to scalar-times-array
//! and row-wise bias addition, everything else must match exactly.

mod fdcheck;
pub mod kernels;
mod tape;

pub use fdcheck::{finite_diff_check, registered_ops, OpCase, FD_ABS_EPS};
pub use tape::{Gradients, RopeTable, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("array handle belongs to another tape")]
    ForeignVar,
    #[error("{0}")]
    Invalid(String),
}
