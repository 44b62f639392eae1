use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing input: {0}")]
    MissingInput(PathBuf),

    #[error("malformed JSON in {path}{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Json {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },

    #[error("validation failed for `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("size mismatch in {what}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        what: String,
        expected: u64,
        found: u64,
    },

    #[error("non-finite value in row {row}")]
    NonFiniteRow { row: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite {what} at step {step}")]
    Diverged { what: String, step: usize },

    #[error("column {index} has zero norm")]
    ZeroColumn { index: usize },

    #[error("steering direction cancels to the zero vector")]
    ZeroDirection,

    #[error("target incoherence {target} not reached after {attempts} attempts (best {best})")]
    Unachievable {
        target: f64,
        best: f64,
        attempts: usize,
    },

    #[error("usage: {0}")]
    Usage(String),

    #[error("output {0} already exists (pass --force to overwrite)")]
    OutputExists(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag used in CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MissingInput(_) => "missing_input",
            Error::Json { .. } => "json",
            Error::Validation { .. } => "validation",
            Error::SizeMismatch { .. } => "size_mismatch",
            Error::NonFiniteRow { .. } => "non_finite",
            Error::Dimension(_) => "dimension",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Diverged { .. } => "diverged",
            Error::ZeroColumn { .. } => "zero_column",
            Error::ZeroDirection => "zero_direction",
            Error::Unachievable { .. } => "unachievable",
            Error::Usage(_) => "usage",
            Error::OutputExists(_) => "output_exists",
        }
    }
}
