use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("oversize error: graph {graph} has {value} {limit}, limit is {max}")]
    Oversize {
        graph: usize,
        limit: &'static str,
        value: usize,
        max: usize,
    },

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("linear algebra error: {0}")]
    LinearAlgebra(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("config error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
