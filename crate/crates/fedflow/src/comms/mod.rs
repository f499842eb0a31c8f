//! Framed binary messages between server and clients, carried either over
//! in-process channels or TCP, with per-round traffic accounting.
//!
//! Frame layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FEDF"
//! 4       1     version (1)
//! 5       1     message kind
//! 6       8     payload length
//! 14      n     payload
//! 14+n    4     CRC-32 of the payload
//! ```
//!
//! A message payload starts with the task id (u32 length + UTF-8) and the
//! round index (u64); the kind-specific body follows.

mod frame;
mod meter;
mod transport;
pub mod wire;

pub use frame::{Frame, Message, MessageKind, FRAME_OVERHEAD, MAGIC, MAX_PAYLOAD, VERSION};
pub use meter::{Direction, TrafficMeter};
pub use transport::{connect_tcp, in_process_pair, Endpoint, InProcessEndpoint, TcpEndpoint};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommsError {
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    VersionMismatch(u8),
    #[error("checksum mismatch: frame says {expected:08x}, payload hashes to {actual:08x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("payload of {0} bytes exceeds the frame cap")]
    TooLarge(u64),
    #[error("malformed message body: {0}")]
    Malformed(String),
    #[error("peer disconnected")]
    Disconnected,
    #[error("timed out waiting for a message")]
    Timeout,
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CommsError {
    fn from(e: std::io::Error) -> Self {
        use std::io::ErrorKind::*;
        match e.kind() {
            UnexpectedEof | ConnectionReset | ConnectionAborted | BrokenPipe => CommsError::Disconnected,
            WouldBlock | TimedOut => CommsError::Timeout,
            _ => CommsError::Io(e.to_string()),
        }
    }
}
