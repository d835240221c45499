//! QTMT intra-partition engine: exhaustive rate-distortion partition search
//! over a quad-tree plus multi-type-tree, a staged convolutional split
//! predictor that prunes the search, and the dataset/evaluation tooling
//! around both.

pub mod codec;
pub mod data;
pub mod eval;
pub mod net;
pub mod par;
pub mod qtmt;
pub mod rdo;
pub mod synth;
pub mod train;

use std::fmt;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn geometry(msg: impl fmt::Display) -> Self {
        Error::Geometry(msg.to_string())
    }
    pub(crate) fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }
    pub(crate) fn format(msg: impl fmt::Display) -> Self {
        Error::Format(msg.to_string())
    }
    pub(crate) fn model(msg: impl fmt::Display) -> Self {
        Error::Model(msg.to_string())
    }
}
