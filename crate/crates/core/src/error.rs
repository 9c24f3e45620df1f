use thiserror::Error;

/// Errors produced by the registration toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid Kent parameters: {0}")]
    InvalidParams(String),

    #[error("degenerate samples: {0}")]
    DegenerateSamples(String),

    #[error("degenerate mean: {0}")]
    DegenerateMean(String),

    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
