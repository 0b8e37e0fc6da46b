use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("trajectory diverged at step {step}")]
    Diverged { step: usize },

    #[error("quadratic program rejected: {0}")]
    InvalidProgram(String),

    #[error("estimation window infeasible at k = {k}; QP dump follows\n{dump}")]
    WindowInfeasible { k: usize, dump: String },

    #[error("invalid iteration bound: {0}")]
    InvalidBound(String),

    #[error("internal consistency check failed: {0}")]
    Internal(String),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("scenario generation exhausted {attempts} attempts")]
    GenerationExhausted { attempts: usize },

    #[error("unknown estimator `{0}`")]
    UnknownEstimator(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
