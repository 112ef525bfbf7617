//! A small message-passing runtime with eager and rendezvous protocols, and a
//! shim that adds asynchronous progress through a dedicated progress thread.
//!
//! The layers, bottom up:
//!
//! * [`transport`]: framing and the connection mesh (TCP or in-process).
//! * [`runtime`]: communicators, `isend`/`irecv`, matching, test/wait.
//! * [`fileio`]: non-blocking, optionally throttled file I/O requests.
//! * [`shim`]: proxy requests served by a progress thread.
//! * [`job`]: helpers to run every rank of a job as threads of one process.

pub mod error;
pub mod fileio;
pub mod job;
pub mod runtime;
pub mod shim;
pub mod transport;

pub use error::{Error, Result};
pub use runtime::{
    Communicator, JobConfig, Request, RequestKind, Runtime, RuntimeOptions, Source, Status,
    StatusError, TagMatch, ThreadLevel, DEFAULT_EAGER_THRESHOLD,
};
