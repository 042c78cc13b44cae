//! Error type shared across the pipeline.

/// Failure categories, grouped by how callers should react:
///
/// * [`Error::Config`]: bad user input (paths, JSON, parameter ranges).
/// * [`Error::Simulation`]: a solve or generation run failed to converge or
///   produced an infeasible state.
/// * [`Error::Compatibility`]: artifacts that do not fit together (feature
///   width mismatch, dataset reuse across splits, malformed binary files).
/// * [`Error::Io`] / [`Error::Internal`]: environment or invariant failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("simulation failure: {0}")]
    Simulation(String),
    #[error("incompatible artifact: {0}")]
    Compatibility(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status for command-line front ends: 2 configuration,
    /// 3 simulation, 4 incompatible artifacts, 5 i/o or internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Simulation(_) => 3,
            Error::Compatibility(_) => 4,
            Error::Io(_) | Error::Internal(_) => 5,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn simulation(msg: impl Into<String>) -> Self {
        Error::Simulation(msg.into())
    }

    pub fn compatibility(msg: impl Into<String>) -> Self {
        Error::Compatibility(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }
}
