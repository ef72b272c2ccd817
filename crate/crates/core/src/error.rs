use thiserror::Error;

/// Errors raised across the extraction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was violated (shapes, ranges, sizes).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinite value reached an operation boundary.
    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// A binary container or dataset file is malformed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// The strategy search would traverse more candidate vectors than allowed.
    #[error("candidate budget exceeded: {product} strategies (limit {limit}), per-exit candidate counts {counts:?}")]
    Budget {
        product: u128,
        limit: u128,
        counts: Vec<usize>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(message: impl Into<String>) -> Error {
    Error::Contract(message.into())
}
