use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    /// A non-finite value surfaced during training. `stream` names the loss
    /// stream or parameter block that produced it.
    #[error("numeric failure in {stream}: {detail}")]
    Numeric { stream: String, detail: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("refusing to overwrite {0} (pass --force)")]
    Overwrite(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {err}")]
    Io {
        path: PathBuf,
        #[source]
        err: std::io::Error,
    },
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Overwrite(_) => 3,
            Error::Numeric { .. } => 4,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            err,
        }
    }

    pub(crate) fn numeric(stream: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            stream: stream.into(),
            detail: detail.into(),
        }
    }
}
