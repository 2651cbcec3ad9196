use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value violates a constraint; `field` names the key.
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    /// Training produced a non-finite value.
    #[error("numerical abort: {0}")]
    Numerical(String),

    /// The preference queue ran dry before a batch could be drawn.
    #[error("preference queue underflow at step {step}: need {needed}, have {available}")]
    Underflow {
        step: usize,
        needed: usize,
        available: usize,
    },

    /// The align prompt split ran out while collecting a phase.
    #[error("prompt split exhausted in phase {phase} after {collected} of {wanted} pairs")]
    PromptsExhausted {
        phase: usize,
        collected: usize,
        wanted: usize,
    },

    #[error("{path}: unsupported format_version {found} (expected {expected})")]
    Incompatible { path: PathBuf, found: u64, expected: u64 },

    /// A file could not be parsed or failed an integrity check.
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable category, used by the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Numerical(_) => "numerical",
            Error::Underflow { .. } | Error::PromptsExhausted { .. } => "data",
            Error::Incompatible { .. } => "incompatible",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
        }
    }
}
