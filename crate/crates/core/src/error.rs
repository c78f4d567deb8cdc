use thiserror::Error;

/// Errors raised by the solvers, generators and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation (time outside the
    /// horizon, mismatched horizons, probability level outside `[0, 1]`).
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid construction parameters or grids.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// Unknown observable or named object.
    #[error("lookup error: {0}")]
    Lookup(String),
    /// A rule or input does not satisfy the contract of the operation it was
    /// passed to (e.g. a stopping rule built on a different filtration).
    #[error("contract error: {0}")]
    Contract(String),
    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
