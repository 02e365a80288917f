//! Dense tensor arithmetic, reverse-mode gradient computation, the Adam
//! optimizer, and a finite-difference gradient checker.
//!
//! Training runs in `f32`; the same code instantiates at `f64` for
//! gradient verification, where finite-difference noise would otherwise
//! mask real bugs. Everything is single-threaded and bit-deterministic.

mod adam;
mod gradcheck;
pub mod graph;
pub mod kernels;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, DifferentiableFn, GradCheckEntry, GradCheckReport, GraphFn};
pub use graph::{bind_params, harvest_grads, BoundParams, Graph, NodeId};
pub use tensor::{Parameter, ParamSet, Real, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("loss over an empty mask")]
    EmptyLoss,
    #[error("function is not deterministic: baseline evaluations differ ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },
    #[error("optimizer: non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("target id {index} out of vocabulary range {vocab}")]
    InvalidTarget { index: usize, vocab: usize },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Convert an `f64` literal into the active precision.
#[inline]
pub fn rf<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("f64 converts to any Real")
}
