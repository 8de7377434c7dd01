//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, inference, and I/O.
#[derive(Debug, Error)]
pub enum PdldsError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid value in {context}: {detail}")]
    InvalidValue { context: String, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("innovation covariance not positive definite at step {t}")]
    NotPositiveDefinite { t: usize },

    #[error("singular linear system in {context}")]
    SingularSystem { context: String },

    #[error("non-finite gradient in {context} at {location}")]
    NonFiniteGradient { context: String, location: String },

    #[error("rank deficient input: {0} nonzero singular values, need {1}")]
    RankDeficient(usize, usize),

    #[error("ODE integration failed in segment {segment}: {detail}")]
    IntegrationFailed { segment: usize, detail: String },

    #[error("fit stage '{stage}' failed at outer iteration {iteration}: {source}")]
    FitStage {
        stage: &'static str,
        iteration: usize,
        #[source]
        source: Box<PdldsError>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, PdldsError>;

impl PdldsError {
    pub(crate) fn dims(context: &str, expected: impl ToString, got: impl ToString) -> Self {
        PdldsError::DimensionMismatch {
            context: context.to_string(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn value(context: &str, detail: impl ToString) -> Self {
        PdldsError::InvalidValue {
            context: context.to_string(),
            detail: detail.to_string(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str, iteration: usize) -> Self {
        PdldsError::FitStage {
            stage,
            iteration,
            source: Box::new(self),
        }
    }
}
