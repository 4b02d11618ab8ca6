use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. The `category` string is stable and used by the CLI
/// for its exit line (`error[<category>]: ...`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("singular affine transform (|det| = {det:.3e})")]
    SingularTransform { det: f64 },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no valid pixel correspondence between the two views")]
    NoCorrespondence,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json ({path}): {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// Stable category tag for CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::SingularTransform { .. } => "transform",
            Error::DegenerateInput(_) => "degenerate",
            Error::ShapeMismatch(_) => "shape",
            Error::NoCorrespondence => "correspondence",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Corrupt(_) => "corrupt",
            Error::Io { .. } => "io",
            Error::Json { .. } => "io",
        }
    }
}
