//! Minimal differentiable-computation engine: dense tensors, forward ops,
//! reverse-mode gradient accumulation, and the Adam optimizer.
//!
//! The engine is define-by-run: a [`Tape`] records every forward op into a
//! flat arena, `backward` replays it in reverse. All model math in the
//! `attention`, `policy`, and `trainer` modules composes from the ops here.
//!
//! Everything is generic over [`Real`] so the production path runs in `f32`
//! while the finite-difference oracle evaluates the identical code in `f64`.

mod adam;
mod gradcheck;
mod linalg;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, FiniteDiffReport, GRAD_CHECK_FLOOR};
pub use tape::{grid_coord, LoadedParams, Tape, Var};
pub use tensor::{ParamSet, Tensor};

/// Kernel re-exports for benchmarks and probes.
pub mod linalg_bench {
    pub use super::linalg::*;
}

use num_traits::Float;

/// Floating-point scalar the engine is generic over.
///
/// `f32` is the production type (parameters, activations, checkpoints);
/// `f64` backs the finite-difference oracle.
pub trait Real:
    Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Errors raised by graph construction and the optimizer.
#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArg { op: &'static str, msg: String },
    #[error("backward: loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("adam_step: parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
}

pub type DiffResult<T> = Result<T, DiffError>;
