use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("collapsed embedding: {0}")]
    Collapsed(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("unsupported image: {0}")]
    UnsupportedImage(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("incompatible version: found {found}, expected {expected}")]
    Version { found: String, expected: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing file referenced by manifest: {}", .0.display())]
    DanglingPath(PathBuf),

    #[error("judge error: {0}")]
    Judge(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Short stable identifier used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::Collapsed(_) => "collapsed",
            Error::DegenerateBatch(_) => "degenerate_batch",
            Error::UnsupportedImage(_) => "unsupported_image",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::Config(_) => "config",
            Error::DanglingPath(_) => "dangling_path",
            Error::Judge(_) => "judge",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
