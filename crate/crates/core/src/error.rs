//! Error type shared across the crate.

use thiserror::Error;

/// Anything that can go wrong while building or running an experiment.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed on-disk data (wrong record size, bad label byte, ...).
    /// `offset` is the byte position of the offending record or field.
    #[error("data format error in {path} at byte {offset}: {detail}")]
    DataFormat {
        path: String,
        offset: u64,
        detail: String,
    },

    /// Semantically invalid data (empty dataset, label out of range, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor/parameter shape disagreement.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Two parameter vectors with different layouts were combined.
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    /// A numerically undefined quantity (rank-0 pseudo-inverse, empty SVD, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Violation of a metric-log schema when reading results back.
    #[error("metrics schema error: {0}")]
    Schema(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml write error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
