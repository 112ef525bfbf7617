use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// The caller broke an API contract (bad rank, double init, reuse of a
    /// consumed request, ...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("frame encoding error: {0}")]
    Encode(String),

    /// The byte stream from `rank` could not be interpreted.
    #[error("protocol error from rank {rank}: {reason}")]
    Protocol { rank: usize, reason: String },

    #[error("startup failure: rank {rank} unreachable: {reason}")]
    Startup { rank: usize, reason: String },

    #[error("transport to rank {rank} failed: {source}")]
    Transport {
        rank: usize,
        #[source]
        source: io::Error,
    },

    /// The eager buffer for one peer overflowed.
    #[error("unexpected-message queue for rank {rank} exceeded {cap} bytes")]
    UnexpectedOverflow { rank: usize, cap: usize },

    #[error("required thread level {0} not available")]
    ThreadLevel(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_))
    }
}
