//! Minimal reverse-mode differentiation engine and the numeric kernels the
//! acoustic model, adapters and CTC loss are built from.
//!
//! Values live in a [`Tape`] arena as flat `f64` buffers. Forward calls record
//! one node per operation; [`Tape::backward`] replays the tape in reverse and
//! accumulates gradients into every `requires_grad` leaf. Everything is
//! float64 and single-threaded within a pass, which keeps gradient checks
//! tight and results bit-reproducible.

mod array;
mod check;
mod special;
mod tape;

pub use array::DiffArray;
pub use check::{grad_check, grad_check_eps, rel_err, FD_EPS};
pub use tape::{CustomOp, Tape, ValueId, LOG_ZERO};

#[allow(unused_imports)] // consumed by the evaluation module's p-values
pub(crate) use special::{erfc, normal_cdf};
