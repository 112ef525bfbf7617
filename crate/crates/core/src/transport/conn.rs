use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::Mutex;

use super::frame::{encode_header, Frame, FrameDecoder, FrameKind};
use crate::error::{Error, Result};

/// What a receiver loop hands to the runtime.
#[derive(Debug)]
pub enum Incoming {
    Frame { from: usize, frame: Frame },
    /// The peer closed its side of the stream.
    Closed { from: usize },
    Failed { from: usize, error: Error },
}

pub type FrameSink = Arc<dyn Fn(Incoming) + Send + Sync>;

/// Injected per-byte delay: payload bytes leave at most at `bytes_per_sec`.
#[derive(Debug, Clone, Copy)]
pub struct Pacing {
    pub bytes_per_sec: u64,
}

impl Pacing {
    fn duration(&self, bytes: usize) -> Duration {
        Duration::from_secs_f64(bytes as f64 / self.bytes_per_sec as f64)
    }
}

fn sleep_until(due: Instant) {
    let now = Instant::now();
    if due > now {
        thread::sleep(due - now);
    }
}

/// Write half of the in-process backend.
pub(crate) struct ChannelWriter {
    tx: mpsc::Sender<Bytes>,
}

impl Write for ChannelWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.tx
            .send(Bytes::copy_from_slice(buf))
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "channel peer gone"))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

pub(crate) fn channel_pair() -> (ChannelWriter, mpsc::Receiver<Bytes>) {
    let (tx, rx) = mpsc::channel();
    (ChannelWriter { tx }, rx)
}

struct WriteSide {
    out: Option<Box<dyn Write + Send>>,
    /// Next sequence number per context id.
    next_seq: HashMap<u32, u64>,
}

/// One ordered, bidirectional stream to a peer. Frame writes are atomic with
/// respect to other writers on the same connection.
pub struct Connection {
    peer: usize,
    write: Mutex<WriteSide>,
    pacing: Option<Pacing>,
    /// When the paced link finishes the payloads reserved so far.
    link_free: Mutex<Instant>,
    tcp: Option<TcpStream>,
    bytes_sent: std::sync::atomic::AtomicU64,
}

impl Connection {
    pub(crate) fn new(
        peer: usize,
        out: Box<dyn Write + Send>,
        pacing: Option<Pacing>,
        tcp: Option<TcpStream>,
    ) -> Self {
        Connection {
            peer,
            write: Mutex::new(WriteSide { out: Some(out), next_seq: HashMap::new() }),
            pacing,
            link_free: Mutex::new(Instant::now()),
            tcp,
            bytes_sent: Default::default(),
        }
    }

    pub fn peer(&self) -> usize {
        self.peer
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent.load(Ordering::Relaxed)
    }

    pub fn send(&self, frame: &Frame) -> Result<()> {
        // A rendezvous payload occupies the link but not the stream: control
        // frames still pass while it is on the wire, the bytes arrive at the
        // end of their slot.
        if frame.kind == FrameKind::RdvData {
            if let Some(end) = self.reserve(frame.payload.len()) {
                sleep_until(end);
                let mut side = self.write.lock();
                return self.write_raw(&mut side, frame);
            }
        }
        let mut side = self.write.lock();
        self.write_locked(&mut side, frame)
    }

    fn reserve(&self, bytes: usize) -> Option<Instant> {
        let p = self.pacing.filter(|_| bytes > 0)?;
        let mut free = self.link_free.lock();
        let end = (*free).max(Instant::now()) + p.duration(bytes);
        *free = end;
        Some(end)
    }

    /// Writes `frame` only if no other frame is being written right now.
    /// Returns whether it was written.
    pub fn try_send(&self, frame: &Frame) -> Result<bool> {
        match self.write.try_lock() {
            Some(mut side) => self.write_locked(&mut side, frame).map(|_| true),
            None => Ok(false),
        }
    }

    /// Assigns the next sequence number of `context_id`, lets `build` turn it
    /// into a frame and writes that frame, all under the connection lock, so
    /// frames of one context leave in sequence order.
    pub fn send_sequenced<F>(&self, context_id: u32, build: F) -> Result<Frame>
    where
        F: FnOnce(u64) -> Result<Frame>,
    {
        let mut side = self.write.lock();
        let seq = *side.next_seq.get(&context_id).unwrap_or(&0);
        let frame = build(seq)?;
        self.write_locked(&mut side, &frame)?;
        side.next_seq.insert(context_id, seq + 1);
        Ok(frame)
    }

    fn write_locked(&self, side: &mut WriteSide, frame: &Frame) -> Result<()> {
        if let Some(end) = self.reserve(frame.payload.len()) {
            sleep_until(end);
        }
        self.write_raw(side, frame)
    }

    fn write_raw(&self, side: &mut WriteSide, frame: &Frame) -> Result<()> {
        let header = encode_header(frame)?;
        let out = side.out.as_mut().ok_or_else(|| Error::Transport {
            rank: self.peer,
            source: io::Error::new(io::ErrorKind::NotConnected, "connection closed"),
        })?;
        let res = (|| {
            out.write_all(&header)?;
            out.write_all(&frame.payload)?;
            out.flush()
        })();
        res.map_err(|source| Error::Transport { rank: self.peer, source })?;
        self.bytes_sent.fetch_add(frame.encoded_len() as u64, Ordering::Relaxed);
        Ok(())
    }

    /// Drops the write side; the peer's receiver loop observes end-of-stream.
    pub(crate) fn close_write(&self) {
        let mut side = self.write.lock();
        side.out = None;
        if let Some(tcp) = &self.tcp {
            let _ = tcp.shutdown(Shutdown::Write);
        }
    }

    /// Forces our own receiver loop for this peer to stop.
    pub(crate) fn close_read(&self) {
        if let Some(tcp) = &self.tcp {
            let _ = tcp.shutdown(Shutdown::Read);
        }
    }
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection").field("peer", &self.peer).finish()
    }
}

const READ_BUF: usize = 256 * 1024;

pub(crate) fn spawn_tcp_reader(
    my_rank: usize,
    peer: usize,
    mut stream: TcpStream,
    eager_threshold: usize,
    sink: FrameSink,
) -> io::Result<JoinHandle<()>> {
    thread::Builder::new().name(format!("apr-rx-{my_rank}<-{peer}")).spawn(move || {
        let mut dec = FrameDecoder::new(peer, eager_threshold);
        let mut buf = vec![0u8; READ_BUF];
        loop {
            match stream.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => {
                    dec.push(&buf[..n]);
                    if !drain(&mut dec, peer, &sink) {
                        return;
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => {
                    sink(Incoming::Failed { from: peer, error: Error::Transport { rank: peer, source: e } });
                    return;
                }
            }
        }
        sink(Incoming::Closed { from: peer });
    })
}

pub(crate) fn spawn_channel_reader(
    my_rank: usize,
    peer: usize,
    rx: mpsc::Receiver<Bytes>,
    stop: Arc<AtomicBool>,
    eager_threshold: usize,
    sink: FrameSink,
) -> io::Result<JoinHandle<()>> {
    thread::Builder::new().name(format!("apr-rx-{my_rank}<-{peer}")).spawn(move || {
        let mut dec = FrameDecoder::new(peer, eager_threshold);
        loop {
            match rx.recv_timeout(Duration::from_millis(20)) {
                Ok(chunk) => {
                    dec.push(&chunk);
                    if !drain(&mut dec, peer, &sink) {
                        return;
                    }
                }
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    if stop.load(Ordering::Acquire) {
                        return;
                    }
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => break,
            }
        }
        sink(Incoming::Closed { from: peer });
    })
}

/// Hands every complete frame to the sink; false once the stream is unusable.
fn drain(dec: &mut FrameDecoder, peer: usize, sink: &FrameSink) -> bool {
    loop {
        match dec.next_frame() {
            Ok(Some(frame)) => sink(Incoming::Frame { from: peer, frame }),
            Ok(None) => return true,
            Err(error) => {
                sink(Incoming::Failed { from: peer, error });
                return false;
            }
        }
    }
}
