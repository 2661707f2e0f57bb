use std::path::PathBuf;

/// Errors produced by the occupancy toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {n_class} classes")]
    LabelOutOfRange { label: usize, n_class: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("backward pass requested without a recorded forward cache")]
    MissingCache,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }

    /// True for failures caused by numerics rather than inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
