//! Little-endian primitive codec shared by every message body.

use super::CommsError;
use crate::params::{Block, ParameterSet};

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(u8::from(v))
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    pub fn opt_u64(&mut self, v: Option<u64>) -> &mut Self {
        match v {
            Some(x) => self.u8(1).u64(x),
            None => self.u8(0),
        }
    }

    pub fn opt_f64(&mut self, v: Option<f64>) -> &mut Self {
        match v {
            Some(x) => self.u8(1).f64(x),
            None => self.u8(0),
        }
    }

    pub fn f32s(&mut self, v: &[f32]) -> &mut Self {
        self.u64(v.len() as u64);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        self
    }

    pub fn u64s(&mut self, v: impl ExactSizeIterator<Item = u64>) -> &mut Self {
        self.u64(v.len() as u64);
        for x in v {
            self.u64(x);
        }
        self
    }

    /// Block count, then per block: name, rank, dims, values.
    pub fn params(&mut self, p: &ParameterSet) -> &mut Self {
        self.u32(p.blocks().len() as u32);
        for b in p.blocks() {
            self.str(b.name());
            self.u32(b.shape().len() as u32);
            for &d in b.shape() {
                self.u64(d as u64);
            }
            self.f32s(b.values());
        }
        self
    }

    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }
}

pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn malformed(detail: impl Into<String>) -> CommsError {
    CommsError::Malformed(detail.into())
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }

    pub fn finish(&self) -> Result<(), CommsError> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(malformed(format!("{} trailing bytes", self.bytes.len() - self.pos)))
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CommsError> {
        let end = self.pos.checked_add(n).ok_or_else(|| malformed("length overflow"))?;
        let s = self.bytes.get(self.pos..end).ok_or_else(|| malformed("body ends early"))?;
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, CommsError> {
        Ok(self.take(1)?[0])
    }

    pub fn bool(&mut self) -> Result<bool, CommsError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(malformed(format!("bad bool {v}"))),
        }
    }

    pub fn u32(&mut self) -> Result<u32, CommsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CommsError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, CommsError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String, CommsError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| malformed("text is not utf-8"))
    }

    pub fn opt_u64(&mut self) -> Result<Option<u64>, CommsError> {
        Ok(if self.bool()? { Some(self.u64()?) } else { None })
    }

    pub fn opt_f64(&mut self) -> Result<Option<f64>, CommsError> {
        Ok(if self.bool()? { Some(self.f64()?) } else { None })
    }

    fn count(&mut self, elem: usize) -> Result<usize, CommsError> {
        let n = self.u64()? as usize;
        if n.saturating_mul(elem) > self.bytes.len() - self.pos {
            return Err(malformed("array longer than body"));
        }
        Ok(n)
    }

    pub fn f32s(&mut self) -> Result<Vec<f32>, CommsError> {
        let n = self.count(4)?;
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn u64s(&mut self) -> Result<Vec<u64>, CommsError> {
        let n = self.count(8)?;
        (0..n).map(|_| self.u64()).collect()
    }

    pub fn params(&mut self) -> Result<ParameterSet, CommsError> {
        let n = self.u32()? as usize;
        let mut blocks = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = self.str()?;
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let values = self.f32s()?;
            blocks.push(Block::new(name, shape, values).map_err(|e| malformed(e.to_string()))?);
        }
        ParameterSet::new(blocks).map_err(|e| malformed(e.to_string()))
    }
}
