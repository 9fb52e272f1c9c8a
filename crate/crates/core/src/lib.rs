//! Soft Q-learning where the Q-function is a state value plus a scaled
//! log-density ratio of a normalizing-flow policy,
//!
//! ```text
//! Q(a, s) = V(s) + α · log(π(a|s) / π̃(a|s)),
//! ```
//!
//! so the soft-optimal policy is read off the Q-function directly and no
//! separate policy-improvement step exists. The temperature `α` is solved per
//! batch from a convex dual under a KL budget.
//!
//! Modules, bottom-up: [`nn`] (differentiation and networks), [`flow`]
//! (Real NVP policy), [`softq`] (value, target and prior composition),
//! [`temperature`] (dual solver), [`replay`] and [`actor`], [`envs`],
//! [`learner`], and the [`checkpoint`]/[`config`]/[`cli`] plumbing.

pub mod actor;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diag;
pub mod envs;
pub mod flow;
pub mod learner;
pub mod nn;
pub mod replay;
pub mod softq;
pub mod temperature;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Not enough data yet; retry after more environment steps.
    #[error("replay holds {have} transitions, {need} needed")]
    NotReady { have: usize, need: usize },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("environment fault: {0}")]
    Env(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by non-finite or otherwise broken numerics.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Nn(nn::NnError::Numeric(_)))
    }
}
