//! Error types shared across the engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Configuration violates a stated constraint.
    #[error("config error: {0}")]
    Config(String),

    /// Input data (streams, annotations, labels) is malformed or infeasible.
    #[error("data error: {0}")]
    Data(String),

    /// Shape or layout mismatch between tensors, units, or caches.
    #[error("shape error: {0}")]
    Shape(String),

    /// A loss or gradient became non-finite.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl CoreError {
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CoreError::Data(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        CoreError::Shape(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        CoreError::Numerical(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
