use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A constructor or operation received an out-of-range parameter.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A client report did not match the sketch it was sent to.
    #[error("rejected report: {0}")]
    RejectedReport(String),

    /// Two artifacts were built with different parameters.
    #[error("incompatible artifacts: {0}")]
    Mismatch(String),

    /// A persisted artifact could not be decoded.
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    /// A dataset file contained a malformed line.
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parameter(msg: impl Into<String>) -> Self {
        Self::Parameter(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Self::Format {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used by front ends to pick exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Self::Parameter(_) | Self::Parse { .. } => ErrorKind::Config,
            Self::Io { .. } => ErrorKind::Io,
            Self::Contract(_) | Self::RejectedReport(_) | Self::Mismatch(_) | Self::Format { .. } => {
                ErrorKind::Contract
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Contract,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
