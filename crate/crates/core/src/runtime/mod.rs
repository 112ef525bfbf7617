//! The message-passing core: communicators, non-blocking point-to-point
//! operations, matching, and the test/wait family.
//!
//! These are the "underlying" operations; [`crate::shim`] wraps the same
//! calls to add a progress thread.

mod comm;
mod engine;
mod matching;
mod request;

use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;

pub use comm::{Communicator, Source, TagMatch};
pub use engine::{Diagnostics, MatchEvent};
pub use matching::{MatchPattern, PostedQueue, UnexpectedQueue};
pub use request::{
    test, test_some, wait, wait_all, wait_any, wait_any_timeout, Phase, Request, RequestKind,
    Status, StatusError, NO_SOURCE,
};
pub(crate) use request::{drive_all, park_any, Driver, RequestCore};

use crate::error::{Error, Result};
use crate::transport::{establish_mesh, MeshOptions, Pacing, TransportSetup};
use engine::Engine;

pub const DEFAULT_EAGER_THRESHOLD: usize = 256 * 1024;
pub const DEFAULT_UNEXPECTED_CAP: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ThreadLevel {
    Single,
    Funneled,
    Serialized,
    Multiple,
}

#[derive(Debug, Clone)]
pub struct RuntimeOptions {
    /// Largest payload sent eagerly; larger messages use rendezvous.
    pub eager_threshold: usize,
    /// Per-peer byte cap of buffered unexpected eager messages.
    pub unexpected_cap: usize,
    /// Optional bandwidth cap applied to payload bytes on remote links.
    pub link_bandwidth: Option<u64>,
    pub connect_timeout: Duration,
    pub finalize_timeout: Duration,
    /// Record every posting and arrival seen by the matcher.
    pub trace_matching: bool,
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        RuntimeOptions {
            eager_threshold: DEFAULT_EAGER_THRESHOLD,
            unexpected_cap: DEFAULT_UNEXPECTED_CAP,
            link_bandwidth: None,
            connect_timeout: Duration::from_secs(20),
            finalize_timeout: Duration::from_secs(60),
            trace_matching: false,
        }
    }
}

/// Everything one rank needs to join its job.
#[derive(Debug)]
pub struct JobConfig {
    pub rank: usize,
    pub size: usize,
    pub transport: TransportSetup,
    pub options: RuntimeOptions,
}

pub const ENV_RANK: &str = "APR_RANK";
pub const ENV_SIZE: &str = "APR_SIZE";
pub const ENV_ENDPOINTS: &str = "APR_ENDPOINTS";
pub const ENV_EAGER_THRESHOLD: &str = "APR_EAGER_THRESHOLD";
/// Inherited, already-bound listening socket (set by the launcher).
pub const ENV_LISTEN_FD: &str = "APR_LISTEN_FD";
pub const ENV_LINK_BANDWIDTH: &str = "APR_LINK_BANDWIDTH";

pub(crate) fn env_parse<T: std::str::FromStr>(name: &str) -> Result<Option<T>> {
    match std::env::var(name) {
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{name}={v:?} is not a valid value"))),
        Err(_) => Ok(None),
    }
}

impl JobConfig {
    /// Reads `APR_RANK`, `APR_SIZE`, `APR_ENDPOINTS` and the optional tuning
    /// variables.
    pub fn from_env() -> Result<Self> {
        let rank: usize = env_parse(ENV_RANK)?.ok_or_else(|| Error::Config(format!("{ENV_RANK} not set")))?;
        let size: usize = env_parse(ENV_SIZE)?.ok_or_else(|| Error::Config(format!("{ENV_SIZE} not set")))?;
        let endpoints_raw =
            std::env::var(ENV_ENDPOINTS).map_err(|_| Error::Config(format!("{ENV_ENDPOINTS} not set")))?;
        let endpoints = parse_endpoints(&endpoints_raw)?;
        if endpoints.len() != size {
            return Err(Error::Config(format!("{ENV_ENDPOINTS} lists {} endpoints, {ENV_SIZE}={size}", endpoints.len())));
        }
        let listener = match env_parse::<i32>(ENV_LISTEN_FD)? {
            Some(fd) => Some(listener_from_fd(fd)?),
            None => None,
        };
        let mut options = RuntimeOptions::default();
        if let Some(t) = env_parse(ENV_EAGER_THRESHOLD)? {
            options.eager_threshold = t;
        }
        options.link_bandwidth = env_parse(ENV_LINK_BANDWIDTH)?;
        Ok(JobConfig { rank, size, transport: TransportSetup::Tcp { endpoints, listener }, options })
    }
}

pub fn parse_endpoints(s: &str) -> Result<Vec<SocketAddr>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("bad endpoint {p:?}"))))
        .collect()
}

#[cfg(unix)]
fn listener_from_fd(fd: i32) -> Result<TcpListener> {
    use std::os::fd::FromRawFd;
    if fd < 0 {
        return Err(Error::Config(format!("{ENV_LISTEN_FD}={fd} is negative")));
    }
    // SAFETY: the launcher hands this descriptor over exclusively to us.
    Ok(unsafe { TcpListener::from_raw_fd(fd) })
}

#[cfg(not(unix))]
fn listener_from_fd(_fd: i32) -> Result<TcpListener> {
    Err(Error::Config(format!("{ENV_LISTEN_FD} is only supported on unix")))
}

static ENV_INIT_DONE: AtomicBool = AtomicBool::new(false);

/// One rank's view of the job. All methods may be called from any thread.
pub struct Runtime {
    engine: Arc<Engine>,
    world: Communicator,
    granted: ThreadLevel,
    next_context: AtomicU32,
    finalize_timeout: Duration,
}

impl Runtime {
    /// Connects this rank to its job. The granted thread level is always
    /// [`ThreadLevel::Multiple`].
    pub fn init(job: JobConfig, requested: ThreadLevel) -> Result<Runtime> {
        let JobConfig { rank, size, transport, options } = job;
        log::debug!("rank {rank}/{size}: init requested {requested:?}");
        let engine = Engine::new(rank, size, options.eager_threshold, options.unexpected_cap);
        if options.trace_matching {
            engine.enable_trace();
        }
        let mesh_opts = MeshOptions {
            eager_threshold: options.eager_threshold,
            pacing: options.link_bandwidth.map(|b| Pacing { bytes_per_sec: b }),
            connect_timeout: options.connect_timeout,
        };
        let mesh = establish_mesh(rank, size, transport, &mesh_opts, engine.sink())?;
        engine.set_mesh(mesh);
        Ok(Runtime {
            engine,
            world: Communicator::new(0, (0..size).collect(), rank),
            granted: ThreadLevel::Multiple,
            next_context: AtomicU32::new(1),
            finalize_timeout: options.finalize_timeout,
        })
    }

    /// Process-level initialization from the launcher's environment. A second
    /// call in the same process is a usage error.
    pub fn init_from_env(requested: ThreadLevel) -> Result<Runtime> {
        if ENV_INIT_DONE.swap(true, Ordering::SeqCst) {
            return Err(Error::usage("runtime already initialized in this process"));
        }
        Runtime::init(JobConfig::from_env()?, requested)
    }

    pub fn thread_level(&self) -> ThreadLevel {
        self.granted
    }

    pub fn rank(&self) -> usize {
        self.engine.rank
    }

    pub fn size(&self) -> usize {
        self.engine.size
    }

    pub fn eager_threshold(&self) -> usize {
        self.engine.eager_threshold
    }

    pub fn world(&self) -> Communicator {
        self.world.clone()
    }

    /// New communicator over the same ranks with a fresh matching context.
    /// Ranks must call this in the same order to agree on context ids.
    pub fn dup(&self, comm: &Communicator) -> Communicator {
        comm.with_context(self.next_context.fetch_add(1, Ordering::Relaxed))
    }

    pub fn isend(&self, data: impl Into<Bytes>, dest: usize, tag: i32, comm: &Communicator) -> Result<Request> {
        self.engine.isend(data.into(), dest, tag, comm)
    }

    pub fn irecv(
        &self,
        capacity: usize,
        source: impl Into<Source>,
        tag: impl Into<TagMatch>,
        comm: &Communicator,
    ) -> Result<Request> {
        self.engine.irecv(capacity, source.into(), tag.into(), comm)
    }

    pub fn test(&self, req: &Request) -> Result<Option<Status>> {
        self.engine.check_open()?;
        test(req)
    }

    pub fn wait(&self, req: &Request) -> Result<Status> {
        self.engine.check_open()?;
        wait(req)
    }

    pub fn test_some(&self, reqs: &[Request]) -> Result<Vec<(usize, Status)>> {
        self.engine.check_open()?;
        test_some(reqs)
    }

    pub fn wait_any(&self, reqs: &[Request]) -> Result<(usize, Status)> {
        self.engine.check_open()?;
        wait_any(reqs)
    }

    pub fn wait_all(&self, reqs: &[Request]) -> Result<Vec<Status>> {
        self.engine.check_open()?;
        wait_all(reqs)
    }

    /// Blocking send.
    pub fn send(&self, data: impl Into<Bytes>, dest: usize, tag: i32, comm: &Communicator) -> Result<Status> {
        let r = self.isend(data, dest, tag, comm)?;
        self.wait(&r)
    }

    /// Blocking receive; returns the status and the received bytes.
    pub fn recv(
        &self,
        capacity: usize,
        source: impl Into<Source>,
        tag: impl Into<TagMatch>,
        comm: &Communicator,
    ) -> Result<(Status, Bytes)> {
        let r = self.irecv(capacity, source, tag, comm)?;
        let st = self.wait(&r)?;
        Ok((st, r.take_data().unwrap_or_default()))
    }

    /// Drives the protocol engine once without waiting for anything.
    pub fn progress(&self) -> Result<()> {
        self.engine.check_open()?;
        self.engine.progress(true)
    }

    /// Wakes every thread blocked inside this runtime.
    pub fn notify(&self) {
        self.engine.notify();
    }

    /// Ids of requests that have not completed yet.
    pub fn outstanding(&self) -> Vec<u64> {
        self.engine.outstanding()
    }

    /// Drains the matcher trace (empty unless `trace_matching` was set).
    pub fn take_match_trace(&self) -> Vec<MatchEvent> {
        self.engine.take_trace()
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.engine.diagnostics()
    }

    pub fn is_finalized(&self) -> bool {
        self.engine.finalized.load(Ordering::Acquire)
    }

    /// Exchanges shutdown notices with every peer and closes the mesh.
    pub fn finalize(&self) -> Result<()> {
        self.engine.finalize(self.finalize_timeout)
    }
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime").field("rank", &self.rank()).field("size", &self.size()).finish()
    }
}
