use thiserror::Error;

/// Errors raised across the calibration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A document did not match its schema.
    #[error("parse error at `{field}`: {message}")]
    Parse { field: String, message: String },

    /// A tabular file had a malformed row.
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },

    /// Input parsed but violates a structural invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// `A exp(B V)` left the representable range.
    #[error("rate overflow for A={a}, B={b}, V={v}")]
    RateOverflow { a: f64, b: f64, v: f64 },

    /// A factorization or propagator produced unusable numbers.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller broke a documented precondition (dimension, length, count).
    #[error("contract violated: {0}")]
    Contract(String),

    /// An argument lies outside the domain of the operation.
    #[error("out of domain: {0}")]
    Domain(String),

    /// CMA-ES never saw a finite objective value.
    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
