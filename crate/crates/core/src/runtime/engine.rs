//! Protocol engine: matching state plus the eager and rendezvous protocols.
//!
//! Receiver loops only append decoded frames to the inbox. Everything that
//! reacts to a frame (matching, clear-to-send replies, rendezvous payload
//! writes) happens inside library calls, so without an external progress
//! thread nothing moves while the application computes.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, OnceLock, Weak};
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::{Condvar, Mutex};

use super::comm::{Communicator, Source, TagMatch};
use super::matching::{MatchPattern, PostedQueue, UnexpectedQueue};
use super::request::{Driver, Phase, Request, RequestKind, Status, StatusError};
use crate::error::{Error, Result};
use crate::transport::{Frame, FrameKind, FrameSink, Incoming, Mesh, MessageEnvelope};

/// (peer process rank, context id, sequence number) of a rendezvous transfer.
type TransferKey = (usize, u32, u64);

#[derive(Debug)]
enum Arrived {
    Eager(Bytes),
    Rts,
}

struct PendingSend {
    req: Request,
    env: MessageEnvelope,
    payload: Bytes,
    dest: usize,
}

struct Fatal {
    rank: usize,
    reason: String,
}

#[derive(Default)]
struct State {
    inbox: VecDeque<Incoming>,
    posted: PostedQueue<Request>,
    unexpected: UnexpectedQueue<(usize, Arrived)>,
    unexpected_bytes: Vec<usize>,
    awaiting_cts: HashMap<TransferKey, PendingSend>,
    ready: VecDeque<PendingSend>,
    awaiting_data: HashMap<TransferKey, Request>,
    /// Incomplete requests, for finalize diagnostics and error propagation.
    live: HashMap<u64, Request>,
    shutdown_seen: Vec<bool>,
    fatal: Option<Fatal>,
    epoch: u64,
    trace: Option<Vec<MatchEvent>>,
    /// Control frames a posting call found its link busy for; the next
    /// test/wait progress call writes them.
    deferred: Vec<Action>,
}

/// One step seen by the matcher, recorded when tracing is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchEvent {
    /// A receive was posted (before it was checked against unexpected messages).
    Posted { request: u64, pattern: MatchPattern },
    /// An eager message or request-to-send reached the matcher.
    Arrived { envelope: MessageEnvelope },
}

/// Counters exposed for diagnostics.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Diagnostics {
    pub progress_calls: u64,
    pub parks: u64,
    pub frames_received: u64,
    pub posted_len: usize,
    pub unexpected_len: usize,
}

struct Action {
    peer: usize,
    frame: Frame,
}

pub(crate) struct Engine {
    pub(crate) rank: usize,
    pub(crate) size: usize,
    pub(crate) eager_threshold: usize,
    unexpected_cap: usize,
    mesh: OnceLock<Mesh>,
    state: Mutex<State>,
    activity: Condvar,
    pub(crate) finalized: AtomicBool,
    progress_calls: AtomicU64,
    parks: AtomicU64,
    frames_received: AtomicU64,
}

impl Engine {
    pub(crate) fn new(rank: usize, size: usize, eager_threshold: usize, unexpected_cap: usize) -> Arc<Self> {
        Arc::new(Engine {
            rank,
            size,
            eager_threshold,
            unexpected_cap,
            mesh: OnceLock::new(),
            state: Mutex::new(State {
                unexpected_bytes: vec![0; size],
                shutdown_seen: vec![false; size],
                ..Default::default()
            }),
            activity: Condvar::new(),
            finalized: AtomicBool::new(false),
            progress_calls: AtomicU64::new(0),
            parks: AtomicU64::new(0),
            frames_received: AtomicU64::new(0),
        })
    }

    /// Sink for receiver loops. Holds only a weak reference to the engine.
    pub(crate) fn sink(self: &Arc<Self>) -> FrameSink {
        let weak: Weak<Engine> = Arc::downgrade(self);
        Arc::new(move |inc: Incoming| {
            if let Some(engine) = weak.upgrade() {
                if matches!(inc, Incoming::Frame { .. }) {
                    engine.frames_received.fetch_add(1, Ordering::Relaxed);
                }
                let mut st = engine.state.lock();
                st.inbox.push_back(inc);
                st.epoch += 1;
                drop(st);
                engine.activity.notify_all();
            }
        })
    }

    pub(crate) fn enable_trace(&self) {
        self.state.lock().trace.get_or_insert_with(Vec::new);
    }

    pub(crate) fn take_trace(&self) -> Vec<MatchEvent> {
        self.state.lock().trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub(crate) fn set_mesh(&self, mesh: Mesh) {
        if self.mesh.set(mesh).is_err() {
            panic!("mesh installed twice");
        }
    }

    fn mesh(&self) -> &Mesh {
        self.mesh.get().expect("mesh installed at init")
    }

    pub(crate) fn check_open(&self) -> Result<()> {
        if self.finalized.load(Ordering::Acquire) {
            return Err(Error::usage("runtime already finalized"));
        }
        Ok(())
    }

    /// Wakes every thread parked on this engine.
    pub(crate) fn notify(&self) {
        self.state.lock().epoch += 1;
        self.activity.notify_all();
    }

    pub(crate) fn diagnostics(&self) -> Diagnostics {
        let st = self.state.lock();
        Diagnostics {
            progress_calls: self.progress_calls.load(Ordering::Relaxed),
            parks: self.parks.load(Ordering::Relaxed),
            frames_received: self.frames_received.load(Ordering::Relaxed),
            posted_len: st.posted.len(),
            unexpected_len: st.unexpected.len(),
        }
    }

    pub(crate) fn isend(self: &Arc<Self>, data: Bytes, dest: usize, tag: i32, comm: &Communicator) -> Result<Request> {
        self.check_open()?;
        if tag < 0 {
            return Err(Error::usage(format!("send tag {tag} is negative")));
        }
        let dest_world = comm
            .world_rank(dest)
            .ok_or_else(|| Error::usage(format!("destination {dest} outside communicator of size {}", comm.size())))?;
        self.progress(false)?;

        let len = data.len();
        let req = Request::new(RequestKind::Send, len, self.clone() as Arc<dyn Driver>);
        let eager = len <= self.eager_threshold;
        let context_id = comm.context_id();
        let conn = self.mesh().conn(dest_world);
        conn.send_sequenced(context_id, |seq| {
            let env = MessageEnvelope {
                context_id,
                tag,
                source: comm.rank() as u32,
                dest: dest as u32,
                seq,
                length: len as u64,
            };
            req.set_envelope(env);
            if eager {
                Frame::eager(env, data.clone(), self.eager_threshold)
            } else {
                let mut st = self.state.lock();
                self.fatal_error(&st)?;
                st.live.insert(req.id(), req.clone());
                st.awaiting_cts.insert(
                    (dest_world, context_id, seq),
                    PendingSend { req: req.clone(), env, payload: data.clone(), dest: dest_world },
                );
                Ok(Frame::control(FrameKind::Rts, env))
            }
        })?;
        if eager {
            req.finish(
                Status { source: comm.rank() as i32, tag, received_bytes: len, error: StatusError::Ok },
                None,
            );
        }
        Ok(req)
    }

    pub(crate) fn irecv(
        self: &Arc<Self>,
        capacity: usize,
        source: Source,
        tag: TagMatch,
        comm: &Communicator,
    ) -> Result<Request> {
        self.check_open()?;
        if let Source::Rank(r) = source {
            if r >= comm.size() {
                return Err(Error::usage(format!("source {r} outside communicator of size {}", comm.size())));
            }
        }
        if let TagMatch::Tag(t) = tag {
            if t < 0 {
                return Err(Error::usage(format!("receive tag {t} is negative")));
            }
        }
        self.progress(false)?;

        let req = Request::new(RequestKind::Recv, capacity, self.clone() as Arc<dyn Driver>);
        let pattern = MatchPattern { context_id: comm.context_id(), source, tag };
        let mut actions = Vec::new();
        {
            let mut st = self.state.lock();
            self.fatal_error(&st)?;
            if let Some(t) = st.trace.as_mut() {
                t.push(MatchEvent::Posted { request: req.id(), pattern });
            }
            match st.unexpected.take_match(&pattern) {
                Some((env, (from, Arrived::Eager(payload)))) => {
                    st.unexpected_bytes[from] -= payload.len();
                    req.set_envelope(env);
                    deliver(&req, &env, payload);
                }
                Some((env, (from, Arrived::Rts))) => {
                    st.live.insert(req.id(), req.clone());
                    self.accept_rts(&mut st, &req, env, from, &mut actions);
                }
                None => {
                    st.live.insert(req.id(), req.clone());
                    st.posted.push(pattern, req.clone());
                }
            }
            st.live.retain(|_, r| !r.is_complete());
        }
        self.execute_or_defer(actions)?;
        Ok(req)
    }

    /// Drains the inbox; with `move_data` also pushes rendezvous payloads whose
    /// clear-to-send has arrived. Only test/wait calls move data.
    pub(crate) fn progress(&self, move_data: bool) -> Result<()> {
        self.progress_calls.fetch_add(1, Ordering::Relaxed);
        let mut actions = Vec::new();
        let ready: Vec<PendingSend> = {
            let mut st = self.state.lock();
            self.fatal_error(&st)?;
            let mut handled = false;
            while let Some(inc) = st.inbox.pop_front() {
                handled = true;
                self.handle(&mut st, inc, &mut actions);
            }
            let ready = if move_data { st.ready.drain(..).collect() } else { Vec::new() };
            if handled {
                st.live.retain(|_, r| !r.is_complete());
                st.epoch += 1;
            }
            ready
        };
        let any = !actions.is_empty() || !ready.is_empty();
        if move_data {
            let mut all = std::mem::take(&mut self.state.lock().deferred);
            all.append(&mut actions);
            self.execute(all)?;
        } else {
            self.execute_or_defer(actions)?;
        }
        for send in ready {
            send.req.advance(Phase::Transferring);
            let frame = Frame::rdv_data(send.env, send.payload);
            let len = frame.payload.len();
            if let Err(e) = self.mesh().conn(send.dest).send(&frame) {
                send.req.finish(
                    Status { source: send.env.source as i32, tag: send.env.tag, received_bytes: 0, error: StatusError::Protocol },
                    None,
                );
                return Err(e);
            }
            send.req.finish(
                Status { source: send.env.source as i32, tag: send.env.tag, received_bytes: len, error: StatusError::Ok },
                None,
            );
        }
        if any {
            let mut st = self.state.lock();
            st.live.retain(|_, r| !r.is_complete());
            st.epoch += 1;
            drop(st);
            self.activity.notify_all();
        }
        let st = self.state.lock();
        self.fatal_error(&st)
    }

    fn execute(&self, actions: Vec<Action>) -> Result<()> {
        if actions.is_empty() {
            return Ok(());
        }
        for a in actions {
            self.mesh().conn(a.peer).send(&a.frame)?;
        }
        self.notify();
        Ok(())
    }

    /// Posting calls must not wait behind a rendezvous payload another thread
    /// is writing on the same link; such frames are left to test/wait.
    fn execute_or_defer(&self, actions: Vec<Action>) -> Result<()> {
        if actions.is_empty() {
            return Ok(());
        }
        let mut busy = Vec::new();
        for a in actions {
            if !self.mesh().conn(a.peer).try_send(&a.frame)? {
                busy.push(a);
            }
        }
        if !busy.is_empty() {
            self.state.lock().deferred.extend(busy);
        }
        self.notify();
        Ok(())
    }

    fn handle(&self, st: &mut State, inc: Incoming, actions: &mut Vec<Action>) {
        match inc {
            Incoming::Frame { from, frame } => self.handle_frame(st, from, frame, actions),
            Incoming::Closed { from } => {
                if !st.shutdown_seen[from] && !self.finalized.load(Ordering::Acquire) {
                    self.set_fatal(st, from, "peer closed its stream before shutdown".into());
                }
            }
            Incoming::Failed { from, error } => self.set_fatal(st, from, error.to_string()),
        }
    }

    fn handle_frame(&self, st: &mut State, from: usize, frame: Frame, actions: &mut Vec<Action>) {
        let env = frame.envelope;
        if matches!(frame.kind, FrameKind::EagerData | FrameKind::Rts) {
            if let Some(t) = st.trace.as_mut() {
                t.push(MatchEvent::Arrived { envelope: env });
            }
        }
        match frame.kind {
            FrameKind::EagerData => match st.posted.take_match(&env) {
                Some((_, req)) => {
                    req.set_envelope(env);
                    deliver(&req, &env, frame.payload);
                }
                None => {
                    st.unexpected_bytes[from] += frame.payload.len();
                    if st.unexpected_bytes[from] > self.unexpected_cap {
                        let err = Error::UnexpectedOverflow { rank: from, cap: self.unexpected_cap };
                        self.set_fatal(st, from, err.to_string());
                        return;
                    }
                    st.unexpected.push(env, (from, Arrived::Eager(frame.payload)));
                }
            },
            FrameKind::Rts => match st.posted.take_match(&env) {
                Some((_, req)) => self.accept_rts(st, &req, env, from, actions),
                None => st.unexpected.push(env, (from, Arrived::Rts)),
            },
            FrameKind::Cts => match st.awaiting_cts.remove(&(from, env.context_id, env.seq)) {
                Some(send) => {
                    send.req.advance(Phase::Matched);
                    st.ready.push_back(send);
                }
                None => self.set_fatal(st, from, format!("clear-to-send for unknown transfer seq {}", env.seq)),
            },
            FrameKind::RdvData => match st.awaiting_data.remove(&(from, env.context_id, env.seq)) {
                Some(req) => deliver(&req, &env, frame.payload),
                None => self.set_fatal(st, from, format!("rendezvous data without clear-to-send, seq {}", env.seq)),
            },
            FrameKind::Shutdown => st.shutdown_seen[from] = true,
            FrameKind::FileioControl => {
                log::debug!("ignoring file-I/O control frame from rank {from}");
            }
        }
    }

    /// A receive matched a request-to-send: reply clear-to-send and wait for data.
    fn accept_rts(&self, st: &mut State, req: &Request, env: MessageEnvelope, from: usize, actions: &mut Vec<Action>) {
        req.set_envelope(env);
        req.advance(Phase::Matched);
        st.awaiting_data.insert((from, env.context_id, env.seq), req.clone());
        req.advance(Phase::Transferring);
        actions.push(Action { peer: from, frame: Frame::control(FrameKind::Cts, env) });
    }

    fn set_fatal(&self, st: &mut State, rank: usize, reason: String) {
        log::error!("rank {}: fatal transport condition from rank {rank}: {reason}", self.rank);
        if st.fatal.is_none() {
            st.fatal = Some(Fatal { rank, reason });
        }
        for (_, req) in st.live.drain() {
            let env = req.envelope().unwrap_or_default();
            req.finish(
                Status { source: env.source as i32, tag: env.tag, received_bytes: 0, error: StatusError::Protocol },
                None,
            );
        }
        st.epoch += 1;
        self.activity.notify_all();
    }

    fn fatal_error(&self, st: &State) -> Result<()> {
        match &st.fatal {
            Some(f) => Err(Error::Protocol { rank: f.rank, reason: f.reason.clone() }),
            None => Ok(()),
        }
    }

    /// Ids of incomplete requests.
    pub(crate) fn outstanding(&self) -> Vec<u64> {
        let mut st = self.state.lock();
        st.live.retain(|_, r| !r.is_complete());
        let mut ids: Vec<u64> = st.live.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub(crate) fn finalize(&self, timeout: Duration) -> Result<()> {
        self.check_open()?;
        let outstanding = self.outstanding();
        if !outstanding.is_empty() {
            return Err(Error::usage(format!("finalize with outstanding requests {outstanding:?}")));
        }
        for peer in (0..self.size).filter(|&p| p != self.rank) {
            let env = MessageEnvelope { source: self.rank as u32, dest: peer as u32, ..Default::default() };
            self.mesh().conn(peer).send(&Frame::control(FrameKind::Shutdown, env))?;
        }
        let deadline = Instant::now() + timeout;
        loop {
            let token = self.drive()?;
            {
                let st = self.state.lock();
                if st.shutdown_seen.iter().enumerate().all(|(r, &seen)| seen || r == self.rank) {
                    break;
                }
            }
            if Instant::now() > deadline {
                let st = self.state.lock();
                let missing: Vec<usize> =
                    (0..self.size).filter(|&r| r != self.rank && !st.shutdown_seen[r]).collect();
                return Err(Error::Startup { rank: missing[0], reason: format!("no shutdown from ranks {missing:?}") });
            }
            self.park_token(token, Duration::from_millis(20));
        }
        self.finalized.store(true, Ordering::Release);
        self.mesh().close();
        Ok(())
    }

    fn park_token(&self, token: u64, timeout: Duration) {
        let mut st = self.state.lock();
        if st.epoch != token || !st.inbox.is_empty() || !st.ready.is_empty() || st.fatal.is_some() {
            return;
        }
        self.parks.fetch_add(1, Ordering::Relaxed);
        self.activity.wait_for(&mut st, timeout);
    }

    fn epoch(&self) -> u64 {
        self.state.lock().epoch
    }
}

impl Driver for Engine {
    fn drive(&self) -> Result<u64> {
        let token = self.epoch();
        self.progress(true)?;
        Ok(token)
    }

    fn park(&self, token: u64, timeout: Duration) {
        self.park_token(token, timeout)
    }
}

/// Completes a receive with `payload`, truncating to the posted capacity.
fn deliver(req: &Request, env: &MessageEnvelope, payload: Bytes) {
    let cap = req.capacity();
    let truncated = payload.len() > cap;
    let n = payload.len().min(cap);
    req.finish(
        Status {
            source: env.source as i32,
            tag: env.tag,
            received_bytes: n,
            error: if truncated { StatusError::Truncated } else { StatusError::Ok },
        },
        Some(payload.slice(..n)),
    );
}
