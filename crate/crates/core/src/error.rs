//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not conform; the message names both shapes.
    #[error("dimension mismatch in {op}: {message}")]
    Dimension { op: &'static str, message: String },

    /// Malformed text input (CSV rows, labels, headers).
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A precondition on caller-supplied data does not hold.
    #[error("invalid input: {0}")]
    Input(String),

    /// Binary file does not follow its declared format.
    #[error("{path}: format error: {message}")]
    Format { path: String, message: String },

    /// A metric is undefined on the given data (e.g. single-class AUC).
    #[error("metric undefined: {0}")]
    Metric(String),

    /// API misuse, such as pairing a forward cache with the wrong spec.
    #[error("usage error: {0}")]
    Usage(String),

    /// Training produced a non-finite value.
    #[error("numeric divergence at iteration {iteration}: {message}")]
    Divergence { iteration: usize, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wraps an I/O error so the message names the file involved.
    pub fn io_at(path: impl AsRef<std::path::Path>, e: std::io::Error) -> Error {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.as_ref().display()),
        ))
    }

    /// Prefixes the message with context, keeping the error kind (and thus
    /// the CLI error code) intact. Wrapped foreign errors pass through.
    pub fn context(self, ctx: impl std::fmt::Display) -> Error {
        match self {
            Error::Dimension { op, message } => Error::Dimension {
                op,
                message: format!("{ctx}: {message}"),
            },
            Error::Parse { line, message } => Error::Parse {
                line,
                message: format!("{ctx}: {message}"),
            },
            Error::Input(m) => Error::Input(format!("{ctx}: {m}")),
            Error::Format { path, message } => Error::Format {
                path,
                message: format!("{ctx}: {message}"),
            },
            Error::Metric(m) => Error::Metric(format!("{ctx}: {m}")),
            Error::Usage(m) => Error::Usage(format!("{ctx}: {m}")),
            Error::Divergence { iteration, message } => Error::Divergence {
                iteration,
                message: format!("{ctx}: {message}"),
            },
            other => other,
        }
    }

    /// Stable machine-readable code, used as the CLI's error prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Parse { .. } => "parse",
            Error::Input(_) => "input",
            Error::Format { .. } => "format",
            Error::Metric(_) => "metric",
            Error::Usage(_) => "usage",
            Error::Divergence { .. } => "divergence",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "parse",
        }
    }
}
