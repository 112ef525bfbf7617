//! The progress queue and the loop run by the progress thread.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicI32, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use parking_lot::{Condvar, Mutex};

use super::config::{pin_current_thread, ShimConfig, WaitsetStrategy};
use super::proxy::ProxyShared;
use crate::fileio::FileHandle;
use crate::runtime::{
    drive_all, park_any, test_some, wait_any_timeout, Communicator, Request, Runtime, Source, Status,
    StatusError, TagMatch, NO_SOURCE,
};

pub(crate) enum Work {
    /// An already-issued point-to-point request.
    Request { req: Request, proxy: Arc<ProxyShared> },
    FileWrite { file: Arc<FileHandle>, offset: u64, data: Bytes, proxy: Arc<ProxyShared> },
    FileRead { file: Arc<FileHandle>, offset: u64, len: usize, proxy: Arc<ProxyShared> },
    /// Point-to-point calls deferred to the progress thread. Only used by
    /// the deliberately broken submission mode.
    DeferredSend { data: Bytes, dest: usize, tag: i32, comm: Communicator, proxy: Arc<ProxyShared> },
    DeferredRecv { capacity: usize, source: Source, tag: TagMatch, comm: Communicator, proxy: Arc<ProxyShared> },
}

#[derive(Default)]
struct QueueState {
    items: VecDeque<Work>,
    shutdown: bool,
    abandon: bool,
}

/// Multi-producer queue consumed by the progress thread.
#[derive(Default)]
pub(crate) struct ProgressQueue {
    state: Mutex<QueueState>,
    cv: Condvar,
    pub(crate) enqueued: AtomicU64,
    pub(crate) completed: AtomicU64,
    pub(crate) max_len: AtomicUsize,
    /// Kernel thread id of the progress thread (0 until it starts).
    pub(crate) tid: AtomicI32,
}

impl ProgressQueue {
    pub(crate) fn push(&self, work: Work) {
        let mut st = self.state.lock();
        st.items.push_back(work);
        self.max_len.fetch_max(st.items.len(), Ordering::Relaxed);
        drop(st);
        self.enqueued.fetch_add(1, Ordering::Relaxed);
        self.cv.notify_all();
    }

    pub(crate) fn len(&self) -> usize {
        self.state.lock().items.len()
    }

    pub(crate) fn shutdown(&self, abandon: bool) {
        let mut st = self.state.lock();
        st.shutdown = true;
        st.abandon |= abandon;
        drop(st);
        self.cv.notify_all();
    }

    /// Takes all queued work; blocks for some when `block` is set.
    fn take(&self, block: bool) -> (Vec<Work>, bool, bool) {
        let mut st = self.state.lock();
        if block {
            while st.items.is_empty() && !st.shutdown {
                self.cv.wait(&mut st);
            }
        }
        (st.items.drain(..).collect(), st.shutdown, st.abandon)
    }
}

fn error_status(kind: StatusError) -> Status {
    Status { source: NO_SOURCE, tag: 0, received_bytes: 0, error: kind }
}

pub(crate) fn progress_loop(rt: Arc<Runtime>, queue: Arc<ProgressQueue>, cfg: ShimConfig) {
    #[cfg(target_os = "linux")]
    queue.tid.store(unsafe { libc::gettid() }, Ordering::Release);
    if let Some(core) = cfg.progress_core() {
        if !pin_current_thread(core) {
            log::info!("rank {}: could not pin progress thread to core {core}; running unpinned", rt.rank());
        }
    }

    let (min_backoff, max_backoff) = cfg.poll_backoff;
    let mut backoff = min_backoff;
    let mut working: Vec<(Request, Arc<ProxyShared>)> = Vec::new();

    loop {
        let (new, shutdown, abandon) = queue.take(working.is_empty());
        if abandon {
            break;
        }
        if !new.is_empty() {
            backoff = min_backoff;
        }
        for work in new {
            if let Some(pair) = submit(&rt, work, &queue) {
                working.push(pair);
            }
        }
        if working.is_empty() {
            if shutdown {
                break;
            }
            continue;
        }

        let reqs: Vec<Request> = working.iter().map(|(r, _)| r.clone()).collect();
        let result = match cfg.waitset_strategy {
            WaitsetStrategy::TestSome => drive_all(&reqs).and_then(|token| {
                let done = test_some(&reqs)?;
                if done.is_empty() {
                    park_any(&reqs, token, backoff);
                    backoff = (backoff * 2).min(max_backoff);
                } else {
                    backoff = min_backoff;
                }
                Ok(done)
            }),
            WaitsetStrategy::WaitAny => wait_any_timeout(&reqs, Some(max_backoff)).and_then(|first| {
                let Some((i, st)) = first else { return Ok(Vec::new()) };
                // harvest whatever else finished during the same wakeup
                let rest: Vec<Request> = reqs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, r)| r.clone()).collect();
                let mut done = vec![(i, st)];
                if !rest.is_empty() {
                    for (j, st) in test_some(&rest)? {
                        done.push((if j < i { j } else { j + 1 }, st));
                    }
                }
                Ok(done)
            }),
        };

        match result {
            Ok(done) => {
                let mut idx: Vec<usize> = done.iter().map(|(i, _)| *i).collect();
                for (i, status) in done {
                    let (req, proxy) = &working[i];
                    proxy.complete(status, req.take_data());
                    queue.completed.fetch_add(1, Ordering::Relaxed);
                }
                idx.sort_unstable_by(|a, b| b.cmp(a));
                for i in idx {
                    working.swap_remove(i);
                }
            }
            Err(e) => {
                log::error!("rank {}: progress thread: {e}", rt.rank());
                for (req, proxy) in working.drain(..) {
                    let status = req.peek_status().unwrap_or(error_status(StatusError::Protocol));
                    proxy.complete(status, req.take_data());
                    queue.completed.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
    }
}

/// Turns queued work into a request to drive. File operations and deferred
/// calls are issued here, on the progress thread.
fn submit(rt: &Runtime, work: Work, queue: &ProgressQueue) -> Option<(Request, Arc<ProxyShared>)> {
    let issued = match work {
        Work::Request { req, proxy } => return Some((req, proxy)),
        Work::FileWrite { file, offset, data, proxy } => (file.iwrite_at(offset, data), proxy),
        Work::FileRead { file, offset, len, proxy } => (file.iread_at(offset, len), proxy),
        Work::DeferredSend { data, dest, tag, comm, proxy } => {
            blocking_deferred(rt, rt.isend(data, dest, tag, &comm), proxy, queue);
            return None;
        }
        Work::DeferredRecv { capacity, source, tag, comm, proxy } => {
            blocking_deferred(rt, rt.irecv(capacity, source, tag, &comm), proxy, queue);
            return None;
        }
    };
    match issued {
        (Ok(req), proxy) => {
            proxy.set_underlying(&req);
            Some((req, proxy))
        }
        (Err(e), proxy) => {
            log::warn!("rank {}: file operation rejected: {e}", rt.rank());
            let kind = match e {
                crate::Error::Io(io) => io.kind(),
                _ => std::io::ErrorKind::InvalidInput,
            };
            proxy.complete(error_status(StatusError::Io(kind)), None);
            queue.completed.fetch_add(1, Ordering::Relaxed);
            None
        }
    }
}

/// Issue and wait, one request at a time. Hangs as soon as a request needs a
/// later queue entry to complete.
fn blocking_deferred(rt: &Runtime, issued: crate::Result<Request>, proxy: Arc<ProxyShared>, queue: &ProgressQueue) {
    let status = issued.and_then(|req| {
        proxy.set_underlying(&req);
        let st = rt.wait(&req)?;
        Ok((st, req.take_data()))
    });
    match status {
        Ok((st, data)) => proxy.complete(st, data),
        Err(_) => proxy.complete(error_status(StatusError::Protocol), None),
    }
    queue.completed.fetch_add(1, Ordering::Relaxed);
}

/// User+system CPU time consumed so far by the thread with kernel id `tid`.
pub(crate) fn thread_cpu_time(tid: i32) -> Option<Duration> {
    #[cfg(target_os = "linux")]
    {
        let stat = std::fs::read_to_string(format!("/proc/self/task/{tid}/stat")).ok()?;
        // fields after the parenthesised command name; utime and stime are
        // overall fields 14 and 15
        let rest = &stat[stat.rfind(')')? + 2..];
        let fields: Vec<&str> = rest.split_whitespace().collect();
        let utime: u64 = fields.get(11)?.parse().ok()?;
        let stime: u64 = fields.get(12)?.parse().ok()?;
        // SAFETY: sysconf has no preconditions.
        let ticks = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
        if ticks <= 0 {
            return None;
        }
        Some(Duration::from_secs_f64((utime + stime) as f64 / ticks as f64))
    }
    #[cfg(not(target_os = "linux"))]
    {
        let _ = tid;
        None
    }
}
