use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::ThreadId;

use bytes::Bytes;
use parking_lot::{Condvar, Mutex};

use crate::error::{Error, Result};
use crate::runtime::{self, Request, RequestKind, Status};

static NEXT_PROXY: AtomicU64 = AtomicU64::new(1);

/// Ids of proxies handed out but not yet consumed.
pub(crate) type LiveSet = Arc<Mutex<BTreeSet<u64>>>;

struct ProxyState {
    status: Option<Status>,
    data: Option<Bytes>,
    underlying: Option<(u64, ThreadId)>,
    consumed: bool,
}

pub(crate) struct ProxyShared {
    id: u64,
    kind: RequestKind,
    completed: AtomicBool,
    state: Mutex<ProxyState>,
    cv: Condvar,
    live: LiveSet,
}

impl ProxyShared {
    pub(crate) fn new(kind: RequestKind, underlying: Option<&Request>, live: &LiveSet) -> Arc<Self> {
        let id = NEXT_PROXY.fetch_add(1, Ordering::Relaxed);
        live.lock().insert(id);
        Arc::new(ProxyShared {
            id,
            kind,
            completed: AtomicBool::new(false),
            state: Mutex::new(ProxyState {
                status: None,
                data: None,
                underlying: underlying.map(|r| (r.id(), r.submitter())),
                consumed: false,
            }),
            cv: Condvar::new(),
            live: live.clone(),
        })
    }

    pub(crate) fn set_underlying(&self, req: &Request) {
        self.state.lock().underlying = Some((req.id(), req.submitter()));
    }

    /// Publishes the underlying request's final status and wakes waiters.
    pub(crate) fn complete(&self, status: Status, data: Option<Bytes>) {
        let mut st = self.state.lock();
        if self.completed.load(Ordering::Acquire) {
            return;
        }
        st.status = Some(status);
        st.data = data;
        self.completed.store(true, Ordering::Release);
        drop(st);
        self.cv.notify_all();
    }

    fn consume(&self, st: &mut ProxyState) -> Result<Status> {
        st.consumed = true;
        self.live.lock().remove(&self.id);
        Ok(st.status.expect("completed proxy has a status"))
    }
}

/// Stand-in handle returned for operations served by the progress thread.
/// It carries the status of the underlying request once that completes.
#[derive(Clone)]
pub struct ProxyRequest {
    pub(crate) shared: Arc<ProxyShared>,
}

impl ProxyRequest {
    pub fn id(&self) -> u64 {
        self.shared.id
    }

    pub fn kind(&self) -> RequestKind {
        self.shared.kind
    }

    /// Id of the request the progress thread drives, once it exists.
    pub fn underlying_id(&self) -> Option<u64> {
        self.shared.state.lock().underlying.map(|u| u.0)
    }

    /// Thread that issued the underlying request.
    pub fn underlying_submitter(&self) -> Option<ThreadId> {
        self.shared.state.lock().underlying.map(|u| u.1)
    }

    pub fn is_complete(&self) -> bool {
        self.shared.completed.load(Ordering::Acquire)
    }

    pub fn peek_status(&self) -> Option<Status> {
        self.shared.state.lock().status
    }

    /// Non-blocking. Never touches the underlying request.
    pub fn test(&self) -> Result<Option<Status>> {
        let mut st = self.shared.state.lock();
        if st.consumed {
            return Err(Error::usage(format!("proxy {} already consumed", self.shared.id)));
        }
        if !self.is_complete() {
            return Ok(None);
        }
        self.shared.consume(&mut st).map(Some)
    }

    /// Blocks until the progress thread has published the final status.
    pub fn wait(&self) -> Result<Status> {
        let mut st = self.shared.state.lock();
        if st.consumed {
            return Err(Error::usage(format!("proxy {} already consumed", self.shared.id)));
        }
        while !self.is_complete() {
            self.shared.cv.wait(&mut st);
        }
        self.shared.consume(&mut st)
    }

    pub fn take_data(&self) -> Option<Bytes> {
        self.shared.state.lock().data.take()
    }
}

impl fmt::Debug for ProxyRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProxyRequest")
            .field("id", &self.shared.id)
            .field("kind", &self.shared.kind)
            .field("completed", &self.is_complete())
            .finish()
    }
}

/// What the shim returns from a non-blocking call: the runtime's own request
/// (eager bypass, or shim disabled) or a proxy.
#[derive(Debug, Clone)]
pub enum Handle {
    Plain(Request),
    Proxy(ProxyRequest),
}

impl Handle {
    pub fn is_proxy(&self) -> bool {
        matches!(self, Handle::Proxy(_))
    }

    pub fn kind(&self) -> RequestKind {
        match self {
            Handle::Plain(r) => r.kind(),
            Handle::Proxy(p) => p.kind(),
        }
    }

    pub fn test(&self) -> Result<Option<Status>> {
        match self {
            Handle::Plain(r) => runtime::test(r),
            Handle::Proxy(p) => p.test(),
        }
    }

    pub fn wait(&self) -> Result<Status> {
        match self {
            Handle::Plain(r) => runtime::wait(r),
            Handle::Proxy(p) => p.wait(),
        }
    }

    pub fn is_complete(&self) -> bool {
        match self {
            Handle::Plain(r) => r.is_complete(),
            Handle::Proxy(p) => p.is_complete(),
        }
    }

    /// Received bytes of a completed receive or read.
    pub fn take_data(&self) -> Option<Bytes> {
        match self {
            Handle::Plain(r) => r.take_data(),
            Handle::Proxy(p) => p.take_data(),
        }
    }
}
