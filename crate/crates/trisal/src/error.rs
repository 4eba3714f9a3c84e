//! Error type shared across the crate.
//!
//! Exit-code mapping for the CLI: validation/config/format problems exit
//! with 2, numerical aborts (NaN/Inf during training) with 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent mismatch between tensors.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid argument (empty corpus, missing saliency input, unknown row name).
    #[error("argument error: {0}")]
    Argument(String),

    /// Inconsistent configuration (missing parameter, bad manifest, checkpoint mismatch).
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite value produced where finite math was required.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Malformed file (checkpoint, manifest, fusion-graph document).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
