//! Reverse-mode differentiation, weight-normalised MLPs and optimisers.

mod matrix;
mod mlp;
mod optim;
mod param;
mod tape;

pub use matrix::Matrix;
pub use mlp::{column_moments, Activation, Mlp, WeightNormLayer, DIRECTION_INIT_STD, VARIANCE_FLOOR};
pub use optim::{OptimKind, OptimState, DEFAULT_LEARNING_RATE};
pub use param::{clip_global_norm, global_grad_norm, ParamTree};
pub use tape::{log1m_sq, log_sech2, tanh, tanh_slice, Gradients, ParamVars, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("backward called on a non-scalar of shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}
