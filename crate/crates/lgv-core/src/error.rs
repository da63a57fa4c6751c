//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("integration diverged at step {step} ({context})")]
    IntegrationDiverged { step: usize, context: String },

    #[error("mass matrix numerically singular (condition estimate {cond:.3e})")]
    SingularMass { cond: f64 },

    #[error("input matrix rank deficient (smallest singular value {sigma_min:.3e}); underactuated systems are not supported")]
    Underactuated { sigma_min: f64 },

    #[error("direction vector (alpha, beta) is numerically zero; mean direction undefined")]
    DegenerateDirection,

    #[error("coordinate {coord} needs coordinate {missing} encoded first (frame dependency order)")]
    OrderingViolation { coord: usize, missing: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("negative concentration kappa = {0}")]
    NegativeKappa(f64),

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
