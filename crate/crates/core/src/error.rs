//! Shared error type for model fitting and prediction.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("model is untrained")]
    UntrainedModel,
    #[error("probability vector not normalized (sum = {0})")]
    NotNormalized(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("too few rows: need at least {need}, have {have}")]
    TooFewRows { need: usize, have: usize },
    #[error("fold degenerate: class {class} has {count} rows, need at least {need}")]
    FoldDegenerate { class: String, count: usize, need: usize },
    #[error("unknown feature: {0}")]
    UnknownFeature(String),
    #[error("zero variance in column {0}")]
    ZeroVariance(usize),
    #[error("learning curve too short: need at least {need} episodes, have {have}")]
    CurveTooShort { need: usize, have: usize },
}
