//! Request handles shared by point-to-point and file operations, and the
//! test/wait family that drives them.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, ThreadId};
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::transport::MessageEnvelope;

/// `Status::source` of requests that have no peer (file I/O).
pub const NO_SOURCE: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RequestKind {
    Send,
    Recv,
    FileWrite,
    FileRead,
}

impl RequestKind {
    pub fn is_point_to_point(self) -> bool {
        matches!(self, RequestKind::Send | RequestKind::Recv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Pending,
    Matched,
    Transferring,
    Complete,
    Errored,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Complete | Phase::Errored)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StatusError {
    Ok,
    /// The message was longer than the receive buffer.
    Truncated,
    Protocol,
    Cancelled,
    /// A file operation failed with this OS error kind.
    Io(std::io::ErrorKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Status {
    pub source: i32,
    pub tag: i32,
    pub received_bytes: usize,
    pub error: StatusError,
}

impl Status {
    pub fn is_ok(&self) -> bool {
        self.error == StatusError::Ok
    }
}

/// Something that can advance requests: the message engine of a runtime, or
/// an individual file operation.
pub(crate) trait Driver: Send + Sync {
    /// Advances outstanding work without blocking on remote events. Returns
    /// an activity token taken before the work was done.
    fn drive(&self) -> Result<u64>;
    /// Blocks until activity newer than `token`, or `timeout` passes.
    fn park(&self, token: u64, timeout: Duration);
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct RequestState {
    pub phase: Phase,
    pub envelope: Option<MessageEnvelope>,
    pub status: Option<Status>,
    pub data: Option<Bytes>,
    /// Capacity of a receive or read buffer.
    pub capacity: usize,
    consumed: bool,
    waiting: bool,
}

pub(crate) struct RequestCore {
    id: u64,
    kind: RequestKind,
    submitter: ThreadId,
    driver: Arc<dyn Driver>,
    pub(crate) state: Mutex<RequestState>,
}

/// Handle to one in-flight non-blocking operation.
///
/// A request has exactly one consumer: once `test` or `wait` has returned its
/// status, further attempts are usage errors.
#[derive(Clone)]
pub struct Request {
    pub(crate) core: Arc<RequestCore>,
}

impl Request {
    pub(crate) fn new(kind: RequestKind, capacity: usize, driver: Arc<dyn Driver>) -> Self {
        Request {
            core: Arc::new(RequestCore {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                kind,
                submitter: thread::current().id(),
                driver,
                state: Mutex::new(RequestState {
                    phase: Phase::Pending,
                    envelope: None,
                    status: None,
                    data: None,
                    capacity,
                    consumed: false,
                    waiting: false,
                }),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.core.id
    }

    pub fn kind(&self) -> RequestKind {
        self.core.kind
    }

    /// Thread that called the operation creating this request.
    pub fn submitter(&self) -> ThreadId {
        self.core.submitter
    }

    pub fn phase(&self) -> Phase {
        self.core.state.lock().phase
    }

    pub fn envelope(&self) -> Option<MessageEnvelope> {
        self.core.state.lock().envelope
    }

    pub fn is_complete(&self) -> bool {
        self.phase().is_terminal()
    }

    pub fn is_consumed(&self) -> bool {
        self.core.state.lock().consumed
    }

    /// Status of a finished request without consuming it.
    pub fn peek_status(&self) -> Option<Status> {
        self.core.state.lock().status
    }

    /// Received bytes of a completed receive or read. Available once.
    pub fn take_data(&self) -> Option<Bytes> {
        let mut st = self.core.state.lock();
        if st.phase.is_terminal() {
            st.data.take()
        } else {
            None
        }
    }

    pub(crate) fn set_envelope(&self, env: MessageEnvelope) {
        self.core.state.lock().envelope = Some(env);
    }

    /// Moves the request forward. Phases only advance; terminal phases stick.
    pub(crate) fn advance(&self, to: Phase) {
        debug_assert!(!to.is_terminal(), "use finish() for terminal phases");
        let mut st = self.core.state.lock();
        if !st.phase.is_terminal() && st.phase < to {
            st.phase = to;
        }
    }

    /// Terminates the request, populating its status. Returns false when the
    /// request had already terminated.
    pub(crate) fn finish(&self, status: Status, data: Option<Bytes>) -> bool {
        let mut st = self.core.state.lock();
        if st.phase.is_terminal() {
            return false;
        }
        st.phase = if status.is_ok() { Phase::Complete } else { Phase::Errored };
        st.status = Some(status);
        st.data = data;
        true
    }

    pub(crate) fn capacity(&self) -> usize {
        self.core.state.lock().capacity
    }

    fn driver(&self) -> &Arc<dyn Driver> {
        &self.core.driver
    }

    fn driver_key(&self) -> *const () {
        Arc::as_ptr(&self.core.driver) as *const ()
    }

    /// Returns the status if terminal and not yet consumed, marking it consumed.
    fn try_consume(&self, st: &mut RequestState) -> Result<Option<Status>> {
        if st.consumed {
            return Err(Error::usage(format!("request {} already consumed", self.core.id)));
        }
        if st.phase.is_terminal() {
            st.consumed = true;
            Ok(st.status)
        } else {
            Ok(None)
        }
    }
}

impl fmt::Debug for Request {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let st = self.core.state.lock();
        f.debug_struct("Request")
            .field("id", &self.core.id)
            .field("kind", &self.core.kind)
            .field("phase", &st.phase)
            .finish()
    }
}

/// Non-blocking completion check. Drives progress once.
pub fn test(req: &Request) -> Result<Option<Status>> {
    {
        let st = req.core.state.lock();
        if st.consumed {
            return Err(Error::usage(format!("request {} already consumed", req.id())));
        }
        if st.waiting {
            return Err(Error::usage(format!("request {} is being waited on by another thread", req.id())));
        }
    }
    req.driver().drive()?;
    let mut st = req.core.state.lock();
    req.try_consume(&mut st)
}

/// Blocks until `req` terminates, driving progress while waiting.
pub fn wait(req: &Request) -> Result<Status> {
    {
        let mut st = req.core.state.lock();
        if st.waiting {
            return Err(Error::usage(format!("request {} is being waited on by another thread", req.id())));
        }
        if let Some(s) = req.try_consume(&mut st)? {
            return Ok(s);
        }
        st.waiting = true;
    }
    let res = wait_inner(req);
    req.core.state.lock().waiting = false;
    res
}

fn wait_inner(req: &Request) -> Result<Status> {
    loop {
        let token = req.driver().drive()?;
        {
            let mut st = req.core.state.lock();
            if st.phase.is_terminal() {
                st.consumed = true;
                return Ok(st.status.expect("terminal request has a status"));
            }
        }
        req.driver().park(token, Duration::from_millis(50));
    }
}

/// Returns every request of `reqs` that has terminated, as (index, status).
/// Already-consumed requests are a usage error.
pub fn test_some(reqs: &[Request]) -> Result<Vec<(usize, Status)>> {
    for r in reqs {
        if r.is_consumed() {
            return Err(Error::usage(format!("request {} already consumed", r.id())));
        }
    }
    drive_all(reqs)?;
    let mut done = Vec::new();
    for (i, r) in reqs.iter().enumerate() {
        let mut st = r.core.state.lock();
        if let Some(s) = r.try_consume(&mut st)? {
            done.push((i, s));
        }
    }
    Ok(done)
}

/// Blocks until one request of `reqs` terminates and returns its index.
pub fn wait_any(reqs: &[Request]) -> Result<(usize, Status)> {
    match wait_any_timeout(reqs, None)? {
        Some(r) => Ok(r),
        None => unreachable!("untimed wait_any returned without completion"),
    }
}

/// Like [`wait_any`] but gives up after `timeout`, returning `None`.
pub fn wait_any_timeout(reqs: &[Request], timeout: Option<Duration>) -> Result<Option<(usize, Status)>> {
    if reqs.is_empty() {
        return Err(Error::usage("wait_any on an empty request list"));
    }
    for r in reqs {
        if r.is_consumed() {
            return Err(Error::usage(format!("request {} already consumed", r.id())));
        }
    }
    let deadline = timeout.map(|t| Instant::now() + t);
    let mixed = distinct_drivers(reqs).len() > 1;
    loop {
        let token = drive_all(reqs)?;
        for (i, r) in reqs.iter().enumerate() {
            let mut st = r.core.state.lock();
            if let Some(s) = r.try_consume(&mut st)? {
                return Ok(Some((i, s)));
            }
        }
        let mut slice = if mixed { Duration::from_millis(1) } else { Duration::from_millis(50) };
        if let Some(d) = deadline {
            let now = Instant::now();
            if now >= d {
                return Ok(None);
            }
            slice = slice.min(d - now);
        }
        park_any(reqs, token, slice);
    }
}

/// Waits for every request, returning statuses in input order.
pub fn wait_all(reqs: &[Request]) -> Result<Vec<Status>> {
    reqs.iter().map(wait).collect()
}

/// Blocks on whichever driver serves `reqs` until activity or `timeout`.
/// `token` must come from the [`drive_all`] call that preceded the check.
pub(crate) fn park_any(reqs: &[Request], token: u64, timeout: Duration) {
    if let Some(r) = reqs.iter().find(|r| !r.is_complete()) {
        r.driver().park(token, timeout);
    }
}

fn distinct_drivers(reqs: &[Request]) -> Vec<&Request> {
    let mut seen: Vec<*const ()> = Vec::new();
    let mut out = Vec::new();
    for r in reqs {
        let k = r.driver_key();
        if !seen.contains(&k) {
            seen.push(k);
            out.push(r);
        }
    }
    out
}

/// Drives every distinct driver once. The returned token belongs to the
/// driver of the first incomplete request.
pub(crate) fn drive_all(reqs: &[Request]) -> Result<u64> {
    let first = reqs.iter().find(|r| !r.is_complete()).map(|r| r.driver_key());
    let mut token = 0;
    for r in distinct_drivers(reqs) {
        let t = r.driver().drive()?;
        if Some(r.driver_key()) == first {
            token = t;
        }
    }
    Ok(token)
}
