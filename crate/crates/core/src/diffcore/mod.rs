//! Dense f64 tensors and the autodiff engine.
//!
//! The engine records every primitive applied to tracked values on a
//! [`Tape`]; [`Tape::backward`] replays the record once in reverse to
//! accumulate gradients, and forward tangent propagation over the same record
//! yields Jacobian columns. Both modes share one linearization per primitive,
//! so reverse and forward derivatives agree to machine precision.
//!
//! Numerical discipline: everything is `f64`, and every primitive checks its
//! output for NaN/Inf. A non-finite value is an error, never a silently
//! propagated state.

pub mod check;
mod conv;
mod ops;
mod tape;
mod tensor;
mod warp;


pub use ops::Op;
pub use tape::{concat, jacobian, vjp, DiffFn, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Error type for tensor and tape operations.
#[derive(Debug, Error)]
pub enum DiffError {
    /// Incompatible operand shapes; both are named in the message.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A shape that the operation cannot accept at all.
    #[error("{op}: invalid shape {shape:?}: {detail}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    /// An operation produced NaN or Inf.
    #[error("{op}: non-finite values in output")]
    NonFinite { op: &'static str },
    /// Argument outside its documented domain.
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    /// Backward was already run on this record.
    #[error("computation record already consumed by backward")]
    TapeConsumed,
    /// Backward requires a scalar loss.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    /// The two values live on different records.
    #[error("{op}: operands belong to different computation records")]
    TapeMismatch { op: &'static str },
    /// Container I/O failure.
    #[error("tensor container i/o: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed tensor container payload.
    #[error("tensor container: {0}")]
    BadContainer(String),
}

/// Result alias used throughout the engine.
pub type DiffResult<T> = Result<T, DiffError>;
