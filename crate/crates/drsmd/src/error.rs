//! Library error type.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("specification error: {0}")]
    Spec(String),
    #[error("insufficient data: n = {n}, need at least {required}")]
    InsufficientData { n: usize, required: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("instrument column {0} has zero variance")]
    ZeroVariance(String),
    #[error("polynomial expansion overflowed in column {0}")]
    Overflow(String),
    #[error("bandwidth must be strictly positive (dimension {0})")]
    ZeroBandwidth(usize),
    #[error(
        "identification failure: condition number {condition_number:.3e} exceeds {threshold:.1e}; \
         the identifying matrix must have singular values bounded away from zero"
    )]
    Identification { condition_number: f64, threshold: f64 },
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("under-identified: {0}")]
    UnderIdentified(String),
    #[error("test undefined for coefficient {0}: standard error is zero")]
    UndefinedTest(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
