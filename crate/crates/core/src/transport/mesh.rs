use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::Mutex;

use super::conn::{
    channel_pair, spawn_channel_reader, spawn_tcp_reader, ChannelWriter, Connection, FrameSink,
    Pacing,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Address {
    Tcp(SocketAddr),
    /// Slot in a [`ChannelHub`].
    Channel(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub rank: usize,
    pub address: Address,
}

/// In-process backend: one byte channel per ordered rank pair.
#[derive(Clone)]
pub struct ChannelHub {
    inner: Arc<HubInner>,
}

struct HubInner {
    size: usize,
    // both indexed [from][to]
    writers: Vec<Vec<Mutex<Option<ChannelWriter>>>>,
    receivers: Vec<Vec<Mutex<Option<mpsc::Receiver<Bytes>>>>>,
}

impl ChannelHub {
    pub fn new(size: usize) -> Self {
        let mut writers = Vec::with_capacity(size);
        let mut receivers = Vec::with_capacity(size);
        for _ in 0..size {
            let (w, r): (Vec<_>, Vec<_>) = (0..size)
                .map(|_| {
                    let (w, rx) = channel_pair();
                    (Mutex::new(Some(w)), Mutex::new(Some(rx)))
                })
                .unzip();
            writers.push(w);
            receivers.push(r);
        }
        ChannelHub { inner: Arc::new(HubInner { size, writers, receivers }) }
    }

    pub fn size(&self) -> usize {
        self.inner.size
    }

    fn take_writer(&self, from: usize, to: usize) -> Option<ChannelWriter> {
        self.inner.writers[from][to].lock().take()
    }

    fn take_receiver(&self, from: usize, to: usize) -> Option<mpsc::Receiver<Bytes>> {
        self.inner.receivers[from][to].lock().take()
    }
}

impl std::fmt::Debug for ChannelHub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChannelHub").field("size", &self.inner.size).finish()
    }
}

/// How one rank reaches the rest of its job.
#[derive(Debug)]
pub enum TransportSetup {
    /// Full TCP mesh. `listener` is this rank's already-bound socket; when
    /// absent the rank binds `endpoints[rank]` itself.
    Tcp { endpoints: Vec<SocketAddr>, listener: Option<TcpListener> },
    Channel(ChannelHub),
}

#[derive(Debug, Clone)]
pub struct MeshOptions {
    pub eager_threshold: usize,
    pub pacing: Option<Pacing>,
    pub connect_timeout: Duration,
}

impl Default for MeshOptions {
    fn default() -> Self {
        MeshOptions {
            eager_threshold: crate::DEFAULT_EAGER_THRESHOLD,
            pacing: None,
            connect_timeout: Duration::from_secs(20),
        }
    }
}

/// The connection set of one rank: one stream per peer plus a loopback.
pub struct Mesh {
    my_rank: usize,
    conns: Vec<Arc<Connection>>,
    readers: Mutex<Vec<JoinHandle<()>>>,
    stop: Arc<AtomicBool>,
    remote_streams: usize,
}

impl Mesh {
    pub fn my_rank(&self) -> usize {
        self.my_rank
    }

    pub fn size(&self) -> usize {
        self.conns.len()
    }

    pub fn conn(&self, rank: usize) -> &Arc<Connection> {
        &self.conns[rank]
    }

    /// Number of streams to other ranks (excludes the loopback).
    pub fn remote_streams(&self) -> usize {
        self.remote_streams
    }

    /// Closes every write side and joins the receiver loops. Peers must close
    /// their side too (or be gone) for the joins to finish.
    pub fn close(&self) {
        for c in &self.conns {
            c.close_write();
        }
        self.stop.store(true, Ordering::Release);
        let readers: Vec<_> = std::mem::take(&mut *self.readers.lock());
        for c in &self.conns {
            c.close_read();
        }
        for r in readers {
            let _ = r.join();
        }
    }
}

impl std::fmt::Debug for Mesh {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mesh").field("my_rank", &self.my_rank).field("size", &self.conns.len()).finish()
    }
}

/// Connects `my_rank` to every rank of the job. Every incoming frame is passed
/// to `sink` from a per-connection receiver thread.
pub fn establish_mesh(
    my_rank: usize,
    size: usize,
    setup: TransportSetup,
    opts: &MeshOptions,
    sink: FrameSink,
) -> Result<Mesh> {
    if size == 0 || my_rank >= size {
        return Err(Error::usage(format!("rank {my_rank} outside job of size {size}")));
    }
    let stop = Arc::new(AtomicBool::new(false));
    let mut readers = Vec::new();
    let mut conns: Vec<Option<Arc<Connection>>> = (0..size).map(|_| None).collect();

    // Loopback is always an in-process channel.
    let (w, rx) = channel_pair();
    conns[my_rank] = Some(Arc::new(Connection::new(my_rank, Box::new(w), None, None)));
    readers.push(spawn_channel_reader(my_rank, my_rank, rx, stop.clone(), opts.eager_threshold, sink.clone())?);

    let remote_streams;
    match setup {
        TransportSetup::Channel(hub) => {
            if hub.size() != size {
                return Err(Error::usage(format!("channel hub of size {} for job of size {size}", hub.size())));
            }
            for peer in (0..size).filter(|&p| p != my_rank) {
                let w = hub
                    .take_writer(my_rank, peer)
                    .ok_or_else(|| Error::usage(format!("channel {my_rank}->{peer} already claimed")))?;
                let rx = hub
                    .take_receiver(peer, my_rank)
                    .ok_or_else(|| Error::usage(format!("channel {peer}->{my_rank} already claimed")))?;
                conns[peer] = Some(Arc::new(Connection::new(peer, Box::new(w), opts.pacing, None)));
                readers.push(spawn_channel_reader(my_rank, peer, rx, stop.clone(), opts.eager_threshold, sink.clone())?);
            }
            remote_streams = size - 1;
        }
        TransportSetup::Tcp { endpoints, listener } => {
            if endpoints.len() != size {
                return Err(Error::usage(format!("{} endpoints for job of size {size}", endpoints.len())));
            }
            let listener = match listener {
                Some(l) => l,
                None => TcpListener::bind(endpoints[my_rank])
                    .map_err(|e| Error::Startup { rank: my_rank, reason: format!("bind {}: {e}", endpoints[my_rank]) })?,
            };
            let streams = connect_tcp(my_rank, &endpoints, listener, opts.connect_timeout)?;
            remote_streams = streams.len();
            for (peer, stream) in streams {
                stream.set_nodelay(true)?;
                let read_half = stream.try_clone()?;
                let ctl = stream.try_clone()?;
                let out = Box::new(io::BufWriter::with_capacity(64 * 1024, stream));
                conns[peer] = Some(Arc::new(Connection::new(peer, out, opts.pacing, Some(ctl))));
                readers.push(spawn_tcp_reader(my_rank, peer, read_half, opts.eager_threshold, sink.clone())?);
            }
        }
    }

    let conns = conns
        .into_iter()
        .enumerate()
        .map(|(r, c)| c.ok_or_else(|| Error::Startup { rank: r, reason: "no connection".into() }))
        .collect::<Result<Vec<_>>>()?;
    Ok(Mesh { my_rank, conns, readers: Mutex::new(readers), stop, remote_streams })
}

/// Lower ranks accept, higher ranks connect; each connector announces its
/// rank with a 4-byte little-endian hello.
fn connect_tcp(
    my_rank: usize,
    endpoints: &[SocketAddr],
    listener: TcpListener,
    timeout: Duration,
) -> Result<Vec<(usize, TcpStream)>> {
    let size = endpoints.len();
    let deadline = Instant::now() + timeout;
    let expected_accepts = size - 1 - my_rank;

    let acceptor = thread::Builder::new().name(format!("apr-accept-{my_rank}")).spawn(
        move || -> Result<Vec<(usize, TcpStream)>> {
            listener.set_nonblocking(true)?;
            let mut got = Vec::new();
            while got.len() < expected_accepts {
                match listener.accept() {
                    Ok((mut s, _)) => {
                        s.set_nonblocking(false)?;
                        s.set_read_timeout(Some(Duration::from_secs(5)))?;
                        let mut hello = [0u8; 4];
                        s.read_exact(&mut hello)?;
                        s.set_read_timeout(None)?;
                        got.push((u32::from_le_bytes(hello) as usize, s));
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        if Instant::now() > deadline {
                            let missing = (my_rank + 1..size)
                                .find(|r| !got.iter().any(|(p, _)| p == r))
                                .unwrap_or(my_rank + 1);
                            return Err(Error::Startup {
                                rank: missing,
                                reason: format!("rank {missing} never connected to rank {my_rank}"),
                            });
                        }
                        thread::sleep(Duration::from_millis(2));
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            Ok(got)
        },
    )?;

    let mut streams = Vec::new();
    for (peer, addr) in endpoints.iter().enumerate().take(my_rank) {
        let mut attempt = 0u32;
        let stream = loop {
            match TcpStream::connect_timeout(addr, Duration::from_secs(1)) {
                Ok(s) => break s,
                Err(e) => {
                    attempt += 1;
                    if Instant::now() > deadline {
                        return Err(Error::Startup {
                            rank: peer,
                            reason: format!("connect to {addr} failed after {attempt} attempts: {e}"),
                        });
                    }
                    thread::sleep(Duration::from_millis(10));
                }
            }
        };
        let mut s = stream;
        s.write_all(&(my_rank as u32).to_le_bytes())?;
        streams.push((peer, s));
    }

    let accepted = acceptor.join().map_err(|_| Error::Startup { rank: my_rank, reason: "acceptor panicked".into() })??;
    for (peer, s) in accepted {
        if peer <= my_rank || peer >= size || streams.iter().any(|(p, _)| *p == peer) {
            return Err(Error::Protocol { rank: peer, reason: format!("bad hello rank {peer}") });
        }
        streams.push((peer, s));
    }
    Ok(streams)
}
