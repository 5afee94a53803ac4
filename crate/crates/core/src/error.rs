use thiserror::Error;

/// Errors raised by the crossnobis library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LdcError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("matrix is near-singular (min/max eigenvalue ratio {ratio:e})")]
    NearSingular { ratio: f64 },

    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate contrast: c'Vc = {0} is not positive")]
    DegenerateContrast(f64),

    #[error("distance matrix is not realizable as squared Euclidean distances (eigenvalue {0:e})")]
    NotRealizable(f64),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("incomplete fold covariance table: {0}")]
    IncompleteTable(String),
}

pub type Result<T> = std::result::Result<T, LdcError>;
