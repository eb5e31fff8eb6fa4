//! Minimal dense linear algebra, layer primitives with hand-derived analytic
//! gradients, optimizers, and a finite-difference gradient checker.
//!
//! There is no autodiff graph here on purpose: every composite loss in the
//! crate carries its own hand-written backward pass, and [`grad_check`]
//! certifies each one against central finite differences. Everything is
//! float64.

mod checkpoint;
mod gradcheck;
mod ops;
mod optim;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError, NamedParam, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{
    l2_normalize, l2_normalize_backward, layer_norm_backward, layer_norm_forward,
    linear_backward, linear_forward, linear_vec, linear_vec_backward, log_sum_exp,
    log_sum_exp_backward, relu, relu_backward, softmax, softmax_backward, LayerNormCache, LN_EPS,
};
pub use optim::{LrSchedule, Optimizer, OptimizerKind};
pub use tensor::{Tensor1, Tensor2};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
    #[error("cannot normalize a vector with norm below 1e-12")]
    ZeroVector,
}
