//! Byte-level transport between the ranks of one job.

mod conn;
mod frame;
mod mesh;

pub use conn::{Connection, FrameSink, Incoming, Pacing};
pub use frame::{
    encode_frame, encode_header, Frame, FrameDecoder, FrameKind, MessageEnvelope, BODY_HEADER,
    HEADER_SIZE, LENGTH_PREFIX,
};
pub use mesh::{establish_mesh, Address, ChannelHub, Endpoint, Mesh, MeshOptions, TransportSetup};
