use super::wire::{Reader, Writer};
use super::CommsError;

pub const MAGIC: [u8; 4] = *b"FEDF";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 14;
/// Header plus trailing checksum.
pub const FRAME_OVERHEAD: usize = HEADER_LEN + 4;
pub const MAX_PAYLOAD: u64 = 256 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageKind {
    Register,
    Plan,
    Upload,
    EvalResult,
    Activations,
    ActGrads,
    DriftNotice,
    Stop,
}

impl MessageKind {
    pub const ALL: [MessageKind; 8] = [
        MessageKind::Register,
        MessageKind::Plan,
        MessageKind::Upload,
        MessageKind::EvalResult,
        MessageKind::Activations,
        MessageKind::ActGrads,
        MessageKind::DriftNotice,
        MessageKind::Stop,
    ];

    pub fn code(self) -> u8 {
        match self {
            MessageKind::Register => 1,
            MessageKind::Plan => 2,
            MessageKind::Upload => 3,
            MessageKind::EvalResult => 4,
            MessageKind::Activations => 5,
            MessageKind::ActGrads => 6,
            MessageKind::DriftNotice => 7,
            MessageKind::Stop => 8,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, CommsError> {
        Self::ALL
            .into_iter()
            .find(|k| k.code() == code)
            .ok_or(CommsError::UnknownKind(code))
    }
}

/// One unit on the wire: a kind byte and an opaque payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Result<Vec<u8>, CommsError> {
        if self.payload.len() as u64 > MAX_PAYLOAD {
            return Err(CommsError::TooLarge(self.payload.len() as u64));
        }
        let mut out = Vec::with_capacity(self.payload.len() + FRAME_OVERHEAD);
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.kind);
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&crc32fast::hash(&self.payload).to_le_bytes());
        Ok(out)
    }

    /// Validates a fixed-size header; returns `(kind, payload length)`.
    pub fn parse_header(header: &[u8]) -> Result<(u8, u64), CommsError> {
        if header.len() < HEADER_LEN {
            return Err(CommsError::Truncated {
                needed: HEADER_LEN,
                available: header.len(),
            });
        }
        let magic: [u8; 4] = header[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(CommsError::BadMagic(magic));
        }
        if header[4] != VERSION {
            return Err(CommsError::VersionMismatch(header[4]));
        }
        let len = u64::from_le_bytes(header[6..14].try_into().unwrap());
        if len > MAX_PAYLOAD {
            return Err(CommsError::TooLarge(len));
        }
        Ok((header[5], len))
    }

    /// Decodes exactly one complete frame.
    pub fn decode(bytes: &[u8]) -> Result<Frame, CommsError> {
        let (kind, len) = Self::parse_header(bytes)?;
        let total = FRAME_OVERHEAD + len as usize;
        if bytes.len() < total {
            return Err(CommsError::Truncated {
                needed: total,
                available: bytes.len(),
            });
        }
        if bytes.len() > total {
            return Err(CommsError::Malformed(format!("{} bytes after the frame", bytes.len() - total)));
        }
        let payload = &bytes[HEADER_LEN..HEADER_LEN + len as usize];
        let expected = u32::from_le_bytes(bytes[total - 4..total].try_into().unwrap());
        let actual = crc32fast::hash(payload);
        if expected != actual {
            return Err(CommsError::Checksum { expected, actual });
        }
        Ok(Frame {
            kind,
            payload: payload.to_vec(),
        })
    }
}

/// Protocol message; `body` is the kind-specific encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub task_id: String,
    pub round_index: u64,
    pub body: Vec<u8>,
}

impl Message {
    pub fn new(kind: MessageKind, task_id: impl Into<String>, round_index: u64, body: Vec<u8>) -> Self {
        Self {
            kind,
            task_id: task_id.into(),
            round_index,
            body,
        }
    }

    pub fn stop(task_id: impl Into<String>) -> Self {
        Self::new(MessageKind::Stop, task_id, 0, Vec::new())
    }

    pub fn to_frame(&self) -> Frame {
        let mut w = Writer::new();
        w.str(&self.task_id).u64(self.round_index).raw(&self.body);
        Frame {
            kind: self.kind.code(),
            payload: w.into_bytes(),
        }
    }

    pub fn from_frame(frame: &Frame) -> Result<Message, CommsError> {
        let kind = MessageKind::from_code(frame.kind)?;
        let mut r = Reader::new(&frame.payload);
        let task_id = r.str()?;
        let round_index = r.u64()?;
        Ok(Message {
            kind,
            task_id,
            round_index,
            body: r.remaining().to_vec(),
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>, CommsError> {
        self.to_frame().encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Message, CommsError> {
        Self::from_frame(&Frame::decode(bytes)?)
    }
}
