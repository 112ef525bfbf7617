//! Length-prefixed binary framing.
//!
//! Every frame on the wire is laid out as
//!
//! ```text
//! [length: u32][kind: u8][comm: u32][tag: i32][src: u32][dst: u32][seq: u64][payload_len: u64][payload]
//! ```
//!
//! with all integers little-endian. `length` counts every byte after itself.
//! `payload_len` carries the message length of the envelope: for data frames
//! it equals the number of payload bytes that follow, for `RTS`/`CTS` it
//! announces the size of the rendezvous transfer while no payload follows.

use bytes::{Buf, Bytes, BytesMut};

use crate::error::{Error, Result};

/// Bytes of the length prefix.
pub const LENGTH_PREFIX: usize = 4;
/// Bytes covered by `length` before the payload starts.
pub const BODY_HEADER: usize = 1 + 4 + 4 + 4 + 4 + 8 + 8;
/// Full size of a frame with an empty payload.
pub const HEADER_SIZE: usize = LENGTH_PREFIX + BODY_HEADER;

/// Frame type codes, fixed by the wire format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    EagerData = 1,
    Rts = 2,
    Cts = 3,
    RdvData = 4,
    FileioControl = 5,
    Shutdown = 6,
}

impl FrameKind {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => FrameKind::EagerData,
            2 => FrameKind::Rts,
            3 => FrameKind::Cts,
            4 => FrameKind::RdvData,
            5 => FrameKind::FileioControl,
            6 => FrameKind::Shutdown,
            _ => return None,
        })
    }

    /// Kinds whose payload bytes must match `envelope.length`.
    fn carries_data(self) -> bool {
        matches!(self, FrameKind::EagerData | FrameKind::RdvData)
    }
}

/// Addressing and matching metadata of one message. Wildcards never appear
/// here; they only exist in receive-side match patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct MessageEnvelope {
    pub context_id: u32,
    pub tag: i32,
    pub source: u32,
    pub dest: u32,
    pub seq: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub envelope: MessageEnvelope,
    pub payload: Bytes,
}

impl Frame {
    /// Builds an `EAGER_DATA` frame, refusing payloads above `eager_threshold`.
    pub fn eager(envelope: MessageEnvelope, payload: Bytes, eager_threshold: usize) -> Result<Self> {
        if payload.len() > eager_threshold {
            return Err(Error::Encode(format!(
                "eager payload of {} bytes exceeds threshold {}",
                payload.len(),
                eager_threshold
            )));
        }
        Ok(Frame {
            kind: FrameKind::EagerData,
            envelope: MessageEnvelope { length: payload.len() as u64, ..envelope },
            payload,
        })
    }

    /// A header-only control frame (`RTS`, `CTS`, `SHUTDOWN`, ...).
    pub fn control(kind: FrameKind, envelope: MessageEnvelope) -> Self {
        Frame { kind, envelope, payload: Bytes::new() }
    }

    pub fn rdv_data(envelope: MessageEnvelope, payload: Bytes) -> Self {
        Frame {
            kind: FrameKind::RdvData,
            envelope: MessageEnvelope { length: payload.len() as u64, ..envelope },
            payload,
        }
    }

    /// Checks the structural invariants of the frame.
    pub fn validate(&self, eager_threshold: usize) -> std::result::Result<(), String> {
        let len = self.payload.len();
        if self.kind.carries_data() && self.envelope.length != len as u64 {
            return Err(format!(
                "{:?} payload_len {} but {} payload bytes",
                self.kind, self.envelope.length, len
            ));
        }
        if !self.kind.carries_data() && len != 0 {
            return Err(format!("{:?} frame carries {} payload bytes", self.kind, len));
        }
        if self.kind == FrameKind::EagerData && len > eager_threshold {
            return Err(format!("eager payload {len} exceeds threshold {eager_threshold}"));
        }
        Ok(())
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_SIZE + self.payload.len()
    }
}

/// Serializes the fixed header of `frame`. The payload is written separately
/// by the caller so large transfers are never copied into a scratch buffer.
pub fn encode_header(frame: &Frame) -> Result<[u8; HEADER_SIZE]> {
    let body = BODY_HEADER as u64 + frame.payload.len() as u64;
    let length = u32::try_from(body).map_err(|_| {
        Error::Encode(format!("frame body of {body} bytes exceeds u32 length prefix"))
    })?;
    let env = &frame.envelope;
    let mut out = [0u8; HEADER_SIZE];
    out[0..4].copy_from_slice(&length.to_le_bytes());
    out[4] = frame.kind as u8;
    out[5..9].copy_from_slice(&env.context_id.to_le_bytes());
    out[9..13].copy_from_slice(&env.tag.to_le_bytes());
    out[13..17].copy_from_slice(&env.source.to_le_bytes());
    out[17..21].copy_from_slice(&env.dest.to_le_bytes());
    out[21..29].copy_from_slice(&env.seq.to_le_bytes());
    out[29..37].copy_from_slice(&env.length.to_le_bytes());
    Ok(out)
}

/// Encodes a whole frame into one buffer after validating it.
pub fn encode_frame(frame: &Frame, eager_threshold: usize) -> Result<Vec<u8>> {
    frame.validate(eager_threshold).map_err(Error::Encode)?;
    let header = encode_header(frame)?;
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(&header);
    out.extend_from_slice(&frame.payload);
    Ok(out)
}

/// Incremental decoder for the byte stream of one peer. Bytes may arrive in
/// arbitrary fragments; surplus bytes after a complete frame are kept for the
/// next call.
#[derive(Debug)]
pub struct FrameDecoder {
    peer: usize,
    eager_threshold: usize,
    buf: BytesMut,
}

impl FrameDecoder {
    pub fn new(peer: usize, eager_threshold: usize) -> Self {
        FrameDecoder { peer, eager_threshold, buf: BytesMut::with_capacity(64 * 1024) }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes buffered but not yet returned as frames.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Returns the next complete frame, `Ok(None)` if more bytes are needed.
    pub fn next_frame(&mut self) -> Result<Option<Frame>> {
        if self.buf.len() < LENGTH_PREFIX {
            return Ok(None);
        }
        let length = u32::from_le_bytes(self.buf[0..4].try_into().unwrap()) as usize;
        if length < BODY_HEADER {
            return Err(self.protocol(format!("length prefix {length} shorter than header")));
        }
        if self.buf.len() >= 5 && FrameKind::from_code(self.buf[4]).is_none() {
            return Err(self.protocol(format!("unknown frame kind {}", self.buf[4])));
        }
        let total = LENGTH_PREFIX + length;
        if self.buf.len() < total {
            self.buf.reserve(total - self.buf.len());
            return Ok(None);
        }
        let mut raw = self.buf.split_to(total);
        raw.advance(LENGTH_PREFIX);
        let kind = FrameKind::from_code(raw.get_u8()).expect("kind checked above");
        let envelope = MessageEnvelope {
            context_id: raw.get_u32_le(),
            tag: raw.get_i32_le(),
            source: raw.get_u32_le(),
            dest: raw.get_u32_le(),
            seq: raw.get_u64_le(),
            length: raw.get_u64_le(),
        };
        let frame = Frame { kind, envelope, payload: raw.freeze() };
        frame.validate(self.eager_threshold).map_err(|reason| self.protocol(reason))?;
        Ok(Some(frame))
    }

    fn protocol(&self, reason: String) -> Error {
        Error::Protocol { rank: self.peer, reason }
    }
}
