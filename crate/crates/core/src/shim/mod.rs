//! Progress-thread shim over the runtime's non-blocking calls.
//!
//! Messages larger than the eager threshold (and all file operations) are
//! handed to a dedicated progress thread, which keeps driving them while the
//! application computes. The application gets a [`Handle::Proxy`] back and
//! waits on that. Small messages bypass the thread entirely.

mod config;
mod progress;
mod proxy;

use std::collections::BTreeSet;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::thread::{JoinHandle, ThreadId};
use std::time::Duration;

use bytes::Bytes;
use parking_lot::Mutex;

pub use config::{
    parse_affinity, ShimConfig, Submission, WaitsetStrategy, ENV_ASYNC, ENV_ASYNC_CPU_LIST, ENV_LOCAL_INDEX,
    ENV_WAITSET,
};
pub use proxy::{Handle, ProxyRequest};

use crate::error::{Error, Result};
use crate::fileio::FileHandle;
use crate::runtime::{Communicator, JobConfig, RequestKind, Runtime, Source, Status, TagMatch, ThreadLevel};
use progress::{progress_loop, thread_cpu_time, ProgressQueue, Work};
use proxy::{LiveSet, ProxyShared};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ShimStats {
    /// Work items handed to the progress thread.
    pub enqueued: u64,
    /// Proxies the progress thread has completed.
    pub completed: u64,
    /// Operations that skipped the progress thread.
    pub bypassed: u64,
    pub max_queue_len: usize,
}

pub struct Shim {
    rt: Arc<Runtime>,
    cfg: ShimConfig,
    queue: Arc<ProgressQueue>,
    thread: Option<JoinHandle<()>>,
    progress_id: Option<ThreadId>,
    live: LiveSet,
    bypassed: std::sync::atomic::AtomicU64,
    requested: ThreadLevel,
}

impl Shim {
    /// Initializes the runtime and starts the progress thread.
    pub fn init(job: JobConfig, cfg: ShimConfig) -> Result<Shim> {
        Shim::init_thread(job, ThreadLevel::Single, cfg)
    }

    /// Like [`Shim::init`]. Whatever the application asks for, the runtime is
    /// initialized at [`ThreadLevel::Multiple`], since the progress thread
    /// calls into it concurrently.
    pub fn init_thread(job: JobConfig, requested: ThreadLevel, cfg: ShimConfig) -> Result<Shim> {
        cfg.validate()?;
        let rt = Runtime::init(job, ThreadLevel::Multiple)?;
        let mut shim = Shim::attach(Arc::new(rt), cfg)?;
        shim.requested = requested;
        Ok(shim)
    }

    /// Process-level initialization from the launcher's environment.
    pub fn init_from_env(requested: ThreadLevel) -> Result<Shim> {
        let cfg = ShimConfig::from_env()?;
        let rt = Runtime::init_from_env(ThreadLevel::Multiple)?;
        let mut shim = Shim::attach(Arc::new(rt), cfg)?;
        shim.requested = requested;
        Ok(shim)
    }

    /// Wraps an initialized runtime. Several shims may be attached and
    /// detached in turn over one runtime.
    pub fn attach(rt: Arc<Runtime>, cfg: ShimConfig) -> Result<Shim> {
        cfg.validate()?;
        if cfg.enabled && rt.thread_level() != ThreadLevel::Multiple {
            return Err(Error::ThreadLevel(format!(
                "progress thread needs {:?}, runtime granted {:?}",
                ThreadLevel::Multiple,
                rt.thread_level()
            )));
        }
        let queue = Arc::new(ProgressQueue::default());
        let (thread, progress_id) = if cfg.enabled {
            let (rt2, q2, c2) = (rt.clone(), queue.clone(), cfg.clone());
            let handle = std::thread::Builder::new()
                .name(format!("apr-progress-{}", rt.rank()))
                .spawn(move || progress_loop(rt2, q2, c2))?;
            let id = handle.thread().id();
            (Some(handle), Some(id))
        } else {
            (None, None)
        };
        Ok(Shim {
            rt,
            cfg,
            queue,
            thread,
            progress_id,
            live: Arc::new(Mutex::new(BTreeSet::new())),
            bypassed: Default::default(),
            requested: ThreadLevel::Multiple,
        })
    }

    pub fn runtime(&self) -> &Arc<Runtime> {
        &self.rt
    }

    pub fn config(&self) -> &ShimConfig {
        &self.cfg
    }

    pub fn world(&self) -> Communicator {
        self.rt.world()
    }

    pub fn rank(&self) -> usize {
        self.rt.rank()
    }

    pub fn size(&self) -> usize {
        self.rt.size()
    }

    pub fn requested_level(&self) -> ThreadLevel {
        self.requested
    }

    pub fn granted_level(&self) -> ThreadLevel {
        self.rt.thread_level()
    }

    pub fn is_enabled(&self) -> bool {
        self.thread.is_some()
    }

    pub fn progress_thread_id(&self) -> Option<ThreadId> {
        self.progress_id
    }

    /// CPU time used so far by the progress thread.
    pub fn progress_thread_cpu_time(&self) -> Option<Duration> {
        let tid = self.queue.tid.load(Ordering::Acquire);
        if tid == 0 {
            return None;
        }
        thread_cpu_time(tid)
    }

    pub fn stats(&self) -> ShimStats {
        ShimStats {
            enqueued: self.queue.enqueued.load(Ordering::Relaxed),
            completed: self.queue.completed.load(Ordering::Relaxed),
            bypassed: self.bypassed.load(Ordering::Relaxed),
            max_queue_len: self.queue.max_len.load(Ordering::Relaxed),
        }
    }

    /// Ids of proxies not yet consumed by test or wait.
    pub fn unconsumed(&self) -> Vec<u64> {
        self.live.lock().iter().copied().collect()
    }

    fn proxied(&self, len: usize) -> bool {
        self.thread.is_some() && !self.cfg.bypasses(len)
    }

    fn enqueue(&self, work: Work) {
        self.queue.push(work);
        // the progress thread may be parked inside the runtime
        self.rt.notify();
    }

    pub fn isend(&self, data: impl Into<Bytes>, dest: usize, tag: i32, comm: &Communicator) -> Result<Handle> {
        let data = data.into();
        if !self.proxied(data.len()) {
            self.bypassed.fetch_add(1, Ordering::Relaxed);
            return self.rt.isend(data, dest, tag, comm).map(Handle::Plain);
        }
        if self.cfg.submission == Submission::ProgressThreadBlocking {
            let proxy = ProxyShared::new(RequestKind::Send, None, &self.live);
            self.enqueue(Work::DeferredSend { data, dest, tag, comm: comm.clone(), proxy: proxy.clone() });
            return Ok(Handle::Proxy(ProxyRequest { shared: proxy }));
        }
        let req = self.rt.isend(data, dest, tag, comm)?;
        let proxy = ProxyShared::new(RequestKind::Send, Some(&req), &self.live);
        self.enqueue(Work::Request { req, proxy: proxy.clone() });
        Ok(Handle::Proxy(ProxyRequest { shared: proxy }))
    }

    /// The receive is proxied when `capacity` exceeds the eager threshold.
    pub fn irecv(
        &self,
        capacity: usize,
        source: impl Into<Source>,
        tag: impl Into<TagMatch>,
        comm: &Communicator,
    ) -> Result<Handle> {
        let (source, tag) = (source.into(), tag.into());
        if !self.proxied(capacity) {
            self.bypassed.fetch_add(1, Ordering::Relaxed);
            return self.rt.irecv(capacity, source, tag, comm).map(Handle::Plain);
        }
        if self.cfg.submission == Submission::ProgressThreadBlocking {
            let proxy = ProxyShared::new(RequestKind::Recv, None, &self.live);
            self.enqueue(Work::DeferredRecv { capacity, source, tag, comm: comm.clone(), proxy: proxy.clone() });
            return Ok(Handle::Proxy(ProxyRequest { shared: proxy }));
        }
        let req = self.rt.irecv(capacity, source, tag, comm)?;
        let proxy = ProxyShared::new(RequestKind::Recv, Some(&req), &self.live);
        self.enqueue(Work::Request { req, proxy: proxy.clone() });
        Ok(Handle::Proxy(ProxyRequest { shared: proxy }))
    }

    /// Non-blocking file write. With the shim enabled it is issued and driven
    /// by the progress thread; otherwise it only advances when tested.
    pub fn file_iwrite_at(&self, file: &Arc<FileHandle>, offset: u64, data: impl Into<Bytes>) -> Result<Handle> {
        let data = data.into();
        if self.thread.is_none() {
            self.bypassed.fetch_add(1, Ordering::Relaxed);
            return file.iwrite_at(offset, data).map(Handle::Plain);
        }
        let proxy = ProxyShared::new(RequestKind::FileWrite, None, &self.live);
        self.enqueue(Work::FileWrite { file: file.clone(), offset, data, proxy: proxy.clone() });
        Ok(Handle::Proxy(ProxyRequest { shared: proxy }))
    }

    pub fn file_iread_at(&self, file: &Arc<FileHandle>, offset: u64, len: usize) -> Result<Handle> {
        if self.thread.is_none() {
            self.bypassed.fetch_add(1, Ordering::Relaxed);
            return file.iread_at(offset, len).map(Handle::Plain);
        }
        let proxy = ProxyShared::new(RequestKind::FileRead, None, &self.live);
        self.enqueue(Work::FileRead { file: file.clone(), offset, len, proxy: proxy.clone() });
        Ok(Handle::Proxy(ProxyRequest { shared: proxy }))
    }

    pub fn test(&self, h: &Handle) -> Result<Option<Status>> {
        h.test()
    }

    pub fn wait(&self, h: &Handle) -> Result<Status> {
        h.wait()
    }

    pub fn wait_all(&self, hs: &[Handle]) -> Result<Vec<Status>> {
        hs.iter().map(Handle::wait).collect()
    }

    /// Stops the progress thread, leaving the runtime usable. Fails if any
    /// proxy was never completed by test or wait.
    pub fn detach(&mut self) -> Result<()> {
        let pending = self.unconsumed();
        if !pending.is_empty() {
            return Err(Error::usage(format!("{} proxy requests not completed by test/wait: {pending:?}", pending.len())));
        }
        self.stop(false);
        Ok(())
    }

    /// Stops the progress thread and finalizes the runtime.
    pub fn finalize(&mut self) -> Result<()> {
        self.detach()?;
        self.rt.finalize()
    }

    fn stop(&mut self, abandon: bool) {
        if let Some(handle) = self.thread.take() {
            self.queue.shutdown(abandon);
            self.rt.notify();
            if handle.join().is_err() {
                log::error!("rank {}: progress thread panicked", self.rt.rank());
            }
        }
    }
}

impl Drop for Shim {
    fn drop(&mut self) {
        self.stop(true);
    }
}

impl std::fmt::Debug for Shim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Shim")
            .field("rank", &self.rt.rank())
            .field("enabled", &self.is_enabled())
            .field("queued", &self.queue.len())
            .finish()
    }
}
