use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("I/O error: {0}")]
    Stream(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    /// A precondition or invariant of an operation was not met by its inputs.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("insufficient supply of {what}: needed {needed}, available {available}")]
    Supply {
        what: String,
        needed: usize,
        available: usize,
    },

    #[error("fact sets differ: {only_before} only in before, {only_after} only in after (e.g. {sample:?})", only_before = .only_before.len(), only_after = .only_after.len())]
    FactSetMismatch {
        only_before: Vec<String>,
        only_after: Vec<String>,
        sample: Vec<String>,
    },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("authentication failed: {0}")]
    Auth(String),

    #[error("stale or missing upstream artifact {path}: {reason} (hint: {hint})")]
    StaleUpstream {
        path: String,
        reason: String,
        hint: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Process exit code for this error: 1 for contract violations, 2 for I/O and transport.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Stream(_) | Error::Transport(_) | Error::Auth(_) => 2,
            Error::Json(_)
            | Error::Csv(_)
            | Error::Contract(_)
            | Error::Supply { .. }
            | Error::FactSetMismatch { .. }
            | Error::StaleUpstream { .. } => 1,
        }
    }
}

/// A per-line (or per-row) problem found while reading an input file.
/// Parsing continues past these.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

impl Diagnostic {
    pub fn new(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Items read from a line-oriented source together with the diagnostics
/// for lines that could not be used.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub items: T,
    pub diagnostics: Vec<Diagnostic>,
}
