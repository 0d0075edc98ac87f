use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is missing, malformed, or violates an invariant.
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("unknown setting `{0}` (expected one of V0..V4)")]
    UnknownSetting(String),

    #[error("phase {0} out of range (expected 0..4)")]
    PhaseOutOfRange(usize),

    #[error("phase change during yellow")]
    PhaseChangeDuringYellow,

    #[error("episode already done")]
    EpisodeDone,

    #[error("episode not finished")]
    EpisodeNotDone,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("cache does not belong to these weights")]
    StaleCache,

    #[error("replay buffer holds {have} transitions, need {need}")]
    InsufficientBuffer { have: usize, need: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("could not parse `{field}` from oracle response")]
    ResponseParse { field: &'static str },

    #[error("oracle estimate rejected: {0}")]
    EstimateRejected(String),

    #[error("oracle backend failed after {attempts} attempt(s): {detail}")]
    Backend { attempts: u32, detail: String },

    #[error("oracle misconfigured: {0}")]
    OracleConfig(String),

    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("statistics: {0}")]
    Statistics(String),

    #[error("malformed {kind} file {path}: {reason}")]
    Format { kind: &'static str, path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit status for the command-line tool: 2 for bad input
    /// (flags, config, files the user pointed at), 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::UnknownSetting(_) | Error::OracleConfig(_) | Error::Format { .. } => 2,
            _ => 3,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(kind: &'static str, path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Format { kind, path: path.into(), reason: reason.to_string() }
    }
}
