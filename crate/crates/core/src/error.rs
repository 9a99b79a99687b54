use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("format error in {field}: {detail}")]
    Format { field: String, detail: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("config error in {field}: {detail}")]
    Config { field: String, detail: String },

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit status: 2 configuration, 3 input/output or file format,
    /// 4 numeric divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Corruption(_) | Error::Degenerate(_) => 3,
            Error::Divergence { .. } | Error::Numeric(_) => 4,
            Error::Dimension(_) | Error::State(_) => 1,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn format(field: &str, detail: impl Into<String>) -> Self {
        Error::Format {
            field: field.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: &str, detail: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
