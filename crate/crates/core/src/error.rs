use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("nonlinear solver failed to converge after {sweeps} sweeps (residual {residual:e})")]
    Solver { sweeps: usize, residual: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("malformed archive {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("checksum mismatch for {0}")]
    Checksum(String),

    #[error("unsupported format version {found} (this build reads version {expected}); re-export the archive with a matching release")]
    Version { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::State(_) => "state",
            Error::Spec(_) => "spec",
            Error::Divergence { .. } => "divergence",
            Error::Solver { .. } => "solver",
            Error::InvalidInput(_) => "input",
            Error::Format { .. } => "format",
            Error::Checksum(_) => "checksum",
            Error::Version { .. } => "version",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }
}
