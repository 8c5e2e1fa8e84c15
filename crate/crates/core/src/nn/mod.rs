//! From-scratch numerics for relation modules: dense matrices, the two-layer
//! `tanh` mapping with exact gradients, AdamW and spectral-norm estimation.

mod linalg;
mod module;
mod optim;
mod spectral;

pub use linalg::{axpy, cosine, dot, norm, normalize, normalize_backward, Matrix};
pub use module::{
    grad_check, module_parameter_count, total_parameter_count, ForwardCache, ForwardOutput,
    GradCheckReport, ModuleGrads, RelationModule, DEFAULT_HIDDEN,
};
pub use optim::{AdamW, AdamWConfig};
pub use spectral::{lipschitz_upper_bound, spectral_norm, PowerIteration};

use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum NnError {
    #[error("input is not unit norm (|x| = {0})")]
    NonUnitInput(f64),
    #[error("module output norm {0:e} is too small to normalize")]
    DegenerateOutput(f64),
    #[error("backward called without a forward cache")]
    MissingForwardCache,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
}
