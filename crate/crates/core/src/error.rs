use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the training stack.
///
/// Variants are grouped so the CLI can map them to exit codes: configuration and
/// usage problems, data problems, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("numeric error in {op}: {msg}")]
    Numeric { op: String, msg: String },

    #[error("solver did not converge after {iters} iterations (residual {residual:.3e})")]
    Solver { iters: usize, residual: f64 },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn numeric(op: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            msg: msg.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Usage(_) => ErrorClass::Usage,
            Error::Input(_) | Error::Format { .. } | Error::Io { .. } => ErrorClass::Data,
            Error::Numeric { .. } | Error::Solver { .. } => ErrorClass::Numeric,
            Error::Context { source, .. } => source.class(),
        }
    }
}

/// Attach context to errors in a `Result`.
pub trait ResultExt<T> {
    fn context_with<F: FnOnce() -> String>(self, f: F) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context_with<F: FnOnce() -> String>(self, f: F) -> Result<T> {
        self.map_err(|e| e.context(f()))
    }
}
