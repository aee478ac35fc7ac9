use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The variants double as the error categories reported by the command-line
/// front end (`config`, `io`, `shape`, `training`, ...).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("training failed at step {step} (seed {seed}): {reason}")]
    Training { step: usize, seed: u64, reason: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Short category name used in CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Json(_) => "config",
            Error::Shape(_) => "shape",
            Error::Domain(_) | Error::UndefinedMetric(_) => "domain",
            Error::Integrity(_) | Error::Training { .. } => "training",
            Error::Io { .. } | Error::Format { .. } | Error::Image(_) => "io",
            Error::Tensor(_) => "tensor",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
