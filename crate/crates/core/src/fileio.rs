//! Non-blocking explicit-offset file I/O with request handles.
//!
//! Operations are executed in chunks by whichever thread drives the request
//! (test/wait, or the shim's progress thread). A per-handle token bucket can
//! cap throughput so I/O time is predictable on fast local disks.

use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::runtime::{env_parse, Driver, Phase, Request, RequestKind, Status, StatusError, NO_SOURCE};

pub const DEFAULT_CHUNK: usize = 4 * 1024 * 1024;
/// Smallest throttled write issued unless fewer bytes remain.
const MIN_THROTTLED_SLICE: usize = 64 * 1024;
pub const ENV_IO_THROTTLE: &str = "APR_IO_THROTTLE";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileMode {
    Read,
    Write,
    ReadWrite,
}

/// Throttle from `APR_IO_THROTTLE` (bytes/second), if set.
pub fn throttle_from_env() -> Result<Option<u64>> {
    env_parse(ENV_IO_THROTTLE)
}

#[derive(Debug)]
struct Bucket {
    tokens: f64,
    last: Instant,
}

#[derive(Debug)]
struct Throttle {
    rate: f64,
    burst: f64,
    bucket: Mutex<Bucket>,
}

impl Throttle {
    fn restart(&self) {
        let mut b = self.bucket.lock();
        b.tokens = 0.0;
        b.last = Instant::now();
    }

    fn refill(&self, b: &mut Bucket) {
        let now = Instant::now();
        b.tokens = (b.tokens + now.duration_since(b.last).as_secs_f64() * self.rate).min(self.burst);
        b.last = now;
    }

    /// Bytes that may go out now, at least `want_min` or zero.
    fn grant(&self, want_max: usize, want_min: usize) -> usize {
        let mut b = self.bucket.lock();
        self.refill(&mut b);
        let avail = b.tokens.floor() as usize;
        if avail < want_min {
            return 0;
        }
        let n = avail.min(want_max);
        b.tokens -= n as f64;
        n
    }

    fn time_until(&self, want: usize) -> Duration {
        let mut b = self.bucket.lock();
        self.refill(&mut b);
        let missing = want as f64 - b.tokens;
        if missing <= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(missing / self.rate)
        }
    }
}

/// An open file usable for non-blocking reads and writes at explicit offsets.
#[derive(Debug)]
pub struct FileHandle {
    path: PathBuf,
    mode: FileMode,
    file: File,
    throttle: Option<Throttle>,
    chunk: usize,
    write_busy: AtomicBool,
    read_busy: AtomicBool,
}

/// Opens `path`. `throttle` caps throughput in bytes per second.
pub fn file_open(path: impl AsRef<Path>, mode: FileMode, throttle: Option<u64>) -> Result<Arc<FileHandle>> {
    FileHandle::open(path, mode, throttle, DEFAULT_CHUNK)
}

impl FileHandle {
    pub fn open(path: impl AsRef<Path>, mode: FileMode, throttle: Option<u64>, chunk: usize) -> Result<Arc<Self>> {
        if chunk == 0 {
            return Err(Error::usage("chunk size must be positive"));
        }
        if throttle == Some(0) {
            return Err(Error::Config("I/O throttle of 0 bytes/s".into()));
        }
        let path = path.as_ref().to_path_buf();
        let mut oo = OpenOptions::new();
        match mode {
            FileMode::Read => oo.read(true),
            FileMode::Write => oo.write(true).create(true),
            FileMode::ReadWrite => oo.read(true).write(true).create(true),
        };
        let file = oo.open(&path)?;
        let throttle = throttle.map(|rate| Throttle {
            rate: rate as f64,
            burst: chunk as f64,
            bucket: Mutex::new(Bucket { tokens: 0.0, last: Instant::now() }),
        });
        Ok(Arc::new(FileHandle {
            path,
            mode,
            file,
            throttle,
            chunk,
            write_busy: AtomicBool::new(false),
            read_busy: AtomicBool::new(false),
        }))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn mode(&self) -> FileMode {
        self.mode
    }

    pub fn throttle(&self) -> Option<u64> {
        self.throttle.as_ref().map(|t| t.rate as u64)
    }

    pub fn len(&self) -> Result<u64> {
        Ok(self.file.metadata()?.len())
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }

    /// Starts writing `data` at `offset`. The request completes once every
    /// byte has been written and flushed to the device.
    pub fn iwrite_at(self: &Arc<Self>, offset: u64, data: impl Into<Bytes>) -> Result<Request> {
        if self.mode == FileMode::Read {
            return Err(Error::usage(format!("{} opened read-only", self.path.display())));
        }
        let data = data.into();
        self.start(Direction::Write, offset, data.len(), Some(data))
    }

    /// Starts reading up to `len` bytes at `offset`. Reading past the end of
    /// the file completes with fewer bytes.
    pub fn iread_at(self: &Arc<Self>, offset: u64, len: usize) -> Result<Request> {
        if self.mode == FileMode::Write {
            return Err(Error::usage(format!("{} opened write-only", self.path.display())));
        }
        self.start(Direction::Read, offset, len, None)
    }

    fn busy_flag(&self, dir: Direction) -> &AtomicBool {
        match dir {
            Direction::Write => &self.write_busy,
            Direction::Read => &self.read_busy,
        }
    }

    fn start(self: &Arc<Self>, dir: Direction, offset: u64, len: usize, data: Option<Bytes>) -> Result<Request> {
        if self.busy_flag(dir).swap(true, Ordering::AcqRel) {
            return Err(Error::usage(format!(
                "a {dir:?} is already in flight on {}",
                self.path.display()
            )));
        }
        let op = Arc::new(FileOp {
            handle: self.clone(),
            dir,
            offset,
            len,
            state: Mutex::new(OpState {
                data,
                read_buf: if dir == Direction::Read { Some(Vec::with_capacity(len)) } else { None },
                done: 0,
                started: false,
                finished: false,
                request: Weak::new(),
            }),
        });
        let kind = match dir {
            Direction::Write => RequestKind::FileWrite,
            Direction::Read => RequestKind::FileRead,
        };
        let req = Request::new(kind, len, op.clone());
        op.state.lock().request = Arc::downgrade(&req.core);
        Ok(req)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Write,
    Read,
}

struct OpState {
    data: Option<Bytes>,
    read_buf: Option<Vec<u8>>,
    done: usize,
    started: bool,
    finished: bool,
    request: Weak<crate::runtime::RequestCore>,
}

struct FileOp {
    handle: Arc<FileHandle>,
    dir: Direction,
    offset: u64,
    len: usize,
    state: Mutex<OpState>,
}

impl FileOp {
    fn complete(&self, st: &mut OpState, status: Status, data: Option<Bytes>) {
        st.finished = true;
        self.handle.busy_flag(self.dir).store(false, Ordering::Release);
        if let Some(core) = st.request.upgrade() {
            Request { core }.finish(status, data);
        }
    }

    fn io_status(&self, bytes: usize, err: Option<&io::Error>) -> Status {
        Status {
            source: NO_SOURCE,
            tag: 0,
            received_bytes: bytes,
            error: err.map_or(StatusError::Ok, |e| StatusError::Io(e.kind())),
        }
    }

    /// Next slice size permitted right now (0 = wait for the throttle).
    fn next_slice(&self, remaining: usize) -> usize {
        let want = remaining.min(self.handle.chunk);
        match &self.handle.throttle {
            None => want,
            Some(t) => t.grant(want, want.min(MIN_THROTTLED_SLICE)),
        }
    }

    fn step(&self, st: &mut OpState) {
        if st.finished {
            return;
        }
        if !st.started {
            st.started = true;
            if let Some(t) = &self.handle.throttle {
                t.restart();
            }
            if let Some(core) = st.request.upgrade() {
                Request { core }.advance(Phase::Transferring);
            }
        }
        let remaining = self.len - st.done;
        if remaining == 0 {
            return self.finish_ok(st);
        }
        let n = self.next_slice(remaining);
        if n == 0 {
            return;
        }
        let pos = self.offset + st.done as u64;
        match self.dir {
            Direction::Write => {
                let data = st.data.as_ref().expect("write op has data");
                match self.handle.file.write_all_at(&data[st.done..st.done + n], pos) {
                    Ok(()) => st.done += n,
                    Err(e) => {
                        let s = self.io_status(st.done, Some(&e));
                        return self.complete(st, s, None);
                    }
                }
            }
            Direction::Read => {
                let buf = st.read_buf.as_mut().expect("read op has buffer");
                let start = buf.len();
                buf.resize(start + n, 0);
                let mut got = 0;
                let mut eof = false;
                while got < n {
                    match self.handle.file.read_at(&mut buf[start + got..start + n], pos + got as u64) {
                        Ok(0) => {
                            eof = true;
                            break;
                        }
                        Ok(k) => got += k,
                        Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                        Err(e) => {
                            buf.truncate(start + got);
                            let s = self.io_status(st.done + got, Some(&e));
                            return self.complete(st, s, None);
                        }
                    }
                }
                buf.truncate(start + got);
                st.done += got;
                if eof {
                    return self.finish_ok(st);
                }
            }
        }
        if st.done == self.len {
            self.finish_ok(st);
        }
    }

    fn finish_ok(&self, st: &mut OpState) {
        match self.dir {
            Direction::Write => {
                if let Err(e) = self.handle.file.sync_data() {
                    let s = self.io_status(st.done, Some(&e));
                    return self.complete(st, s, None);
                }
                let s = self.io_status(st.done, None);
                st.data = None;
                self.complete(st, s, None)
            }
            Direction::Read => {
                let data = st.read_buf.take().map(Bytes::from);
                let s = self.io_status(st.done, None);
                self.complete(st, s, data)
            }
        }
    }
}

impl Driver for FileOp {
    fn drive(&self) -> Result<u64> {
        let mut st = self.state.lock();
        self.step(&mut st);
        Ok(0)
    }

    fn park(&self, _token: u64, timeout: Duration) {
        let wait = {
            let st = self.state.lock();
            if st.finished || !st.started {
                return;
            }
            let remaining = self.len - st.done;
            match &self.handle.throttle {
                Some(t) => t.time_until(remaining.min(self.handle.chunk).min(MIN_THROTTLED_SLICE)),
                None => Duration::ZERO,
            }
        };
        let wait = wait.min(timeout);
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}
