use std::io;

/// Errors produced by the library. CLI exit codes are derived from the variant.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("format error in `{field}`: {message}")]
    Format { field: &'static str, message: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("singular or ill-conditioned TPS system (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("optimization diverged at iteration {iteration}: {message}")]
    Divergence { iteration: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn format(field: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            field,
            message: msg.into(),
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format { .. } => 2,
            Error::Numeric(_) | Error::Singular { .. } | Error::Divergence { .. } => 3,
            Error::Argument(_) | Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
