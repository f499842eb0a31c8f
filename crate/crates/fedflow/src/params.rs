//! Named, shaped parameter blocks.
//!
//! A [`ParameterSet`] is the unit that is exchanged between server and clients,
//! aggregated, split at a cut layer, and checkpointed. Values are stored as
//! `f32`; arithmetic that combines several sets accumulates in `f64`.

use std::io::{Read, Write};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("block `{name}`: shape {shape:?} needs {expected} values, got {actual}")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("duplicate block name `{0}`")]
    DuplicateName(String),
    #[error("non-finite value in block `{0}`")]
    NonFinite(String),
    #[error("parameter sets are not congruent")]
    Incongruent,
    #[error("linear combination needs at least one term")]
    EmptyCombination,
    #[error("unknown block `{0}`")]
    UnknownBlock(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

/// One named tensor, flattened in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    name: String,
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl Block {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<Self, ParamError> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(ParamError::ShapeMismatch {
                name,
                shape,
                expected,
                actual: values.len(),
            });
        }
        Ok(Self { name, shape, values })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            values: vec![0.0; len],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn same_layout(&self, other: &Block) -> bool {
        self.name == other.name && self.shape == other.shape
    }
}

/// Ordered list of uniquely named blocks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    blocks: Vec<Block>,
}

impl ParameterSet {
    pub fn new(blocks: Vec<Block>) -> Result<Self, ParamError> {
        for (i, b) in blocks.iter().enumerate() {
            if blocks[..i].iter().any(|o| o.name == b.name) {
                return Err(ParamError::DuplicateName(b.name.clone()));
            }
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut Block> {
        self.blocks.iter_mut().find(|b| b.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|b| b.name.as_str())
    }

    pub fn num_values(&self) -> usize {
        self.blocks.iter().map(Block::len).sum()
    }

    /// Storage footprint of the values in bytes.
    pub fn byte_size(&self) -> usize {
        self.num_values() * std::mem::size_of::<f32>()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Same names, same order, same shapes.
    pub fn congruent(&self, other: &ParameterSet) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| a.same_layout(b))
    }

    pub fn zeros_like(&self) -> ParameterSet {
        self.filled_like(0.0)
    }

    pub fn filled_like(&self, value: f32) -> ParameterSet {
        ParameterSet {
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                    values: vec![value; b.values.len()],
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.values.iter().all(|v| v.is_finite()))
    }

    pub fn check_finite(&self) -> Result<(), ParamError> {
        match self.blocks.iter().find(|b| b.values.iter().any(|v| !v.is_finite())) {
            Some(b) => Err(ParamError::NonFinite(b.name.clone())),
            None => Ok(()),
        }
    }

    /// Iterates every value across blocks in order.
    pub fn iter_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.blocks.iter().flat_map(|b| b.values.iter().copied())
    }

    pub fn to_flat(&self) -> Vec<f32> {
        self.iter_values().collect()
    }

    /// Keeps only the named blocks, in this set's order.
    pub fn select(&self, names: &[String]) -> Result<ParameterSet, ParamError> {
        for n in names {
            if self.block(n).is_none() {
                return Err(ParamError::UnknownBlock(n.clone()));
            }
        }
        Ok(ParameterSet {
            blocks: self
                .blocks
                .iter()
                .filter(|b| names.iter().any(|n| n == &b.name))
                .cloned()
                .collect(),
        })
    }

    /// Overwrites blocks of `self` with the same-named blocks of `other`.
    pub fn overwrite_from(&mut self, other: &ParameterSet) -> Result<(), ParamError> {
        for src in &other.blocks {
            let dst = self
                .block_mut(&src.name)
                .ok_or_else(|| ParamError::UnknownBlock(src.name.clone()))?;
            if dst.shape != src.shape {
                return Err(ParamError::Incongruent);
            }
            dst.values.copy_from_slice(&src.values);
        }
        Ok(())
    }

    /// Concatenates two sets with disjoint names.
    pub fn concat(&self, other: &ParameterSet) -> Result<ParameterSet, ParamError> {
        let mut blocks = self.blocks.clone();
        blocks.extend(other.blocks.iter().cloned());
        ParameterSet::new(blocks)
    }

    /// Element-wise `Σ coef · p`, accumulated in `f64`.
    pub fn linear_combine(terms: &[(f64, &ParameterSet)]) -> Result<ParameterSet, ParamError> {
        let (_, first) = terms.first().ok_or(ParamError::EmptyCombination)?;
        if terms.iter().any(|(_, p)| !p.congruent(first)) {
            return Err(ParamError::Incongruent);
        }
        let mut out = first.zeros_like();
        let mut acc = Vec::new();
        for (bi, block) in out.blocks.iter_mut().enumerate() {
            acc.clear();
            acc.resize(block.values.len(), 0.0f64);
            for (coef, p) in terms {
                for (a, &v) in acc.iter_mut().zip(&p.blocks[bi].values) {
                    *a += coef * f64::from(v);
                }
            }
            for (dst, a) in block.values.iter_mut().zip(&acc) {
                *dst = *a as f32;
            }
        }
        Ok(out)
    }

    /// `self - other`, element-wise.
    pub fn sub(&self, other: &ParameterSet) -> Result<ParameterSet, ParamError> {
        ParameterSet::linear_combine(&[(1.0, self), (-1.0, other)])
    }

    pub fn squared_distance(&self, other: &ParameterSet) -> Result<f64, ParamError> {
        if !self.congruent(other) {
            return Err(ParamError::Incongruent);
        }
        Ok(self
            .iter_values()
            .zip(other.iter_values())
            .map(|(a, b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum())
    }

    /// Writes the checkpoint layout: magic, block directory, then every value
    /// as little-endian `f32` in block order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.blocks.len() as u32).to_le_bytes())?;
        for b in &self.blocks {
            w.write_all(&(b.name.len() as u32).to_le_bytes())?;
            w.write_all(b.name.as_bytes())?;
            w.write_all(&(b.shape.len() as u32).to_le_bytes())?;
            for &d in &b.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        for b in &self.blocks {
            for v in &b.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_size() + 64);
        self.write_checkpoint(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParameterSet, ParamError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| ParamError::Checkpoint(e.to_string()))?;
        ParameterSet::from_checkpoint_bytes(&bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<ParameterSet, ParamError> {
        let bad = |m: &str| ParamError::Checkpoint(m.to_string());
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(CHECKPOINT_MAGIC.len()).ok_or_else(|| bad("truncated magic"))? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let n = cur.u32().ok_or_else(|| bad("truncated block count"))? as usize;
        let mut dir = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = cur.u32().ok_or_else(|| bad("truncated name length"))? as usize;
            let name = cur.take(len).ok_or_else(|| bad("truncated name"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| bad("name is not utf-8"))?;
            let ndims = cur.u32().ok_or_else(|| bad("truncated rank"))? as usize;
            let mut shape = Vec::with_capacity(ndims.min(16));
            for _ in 0..ndims {
                shape.push(cur.u64().ok_or_else(|| bad("truncated shape"))? as usize);
            }
            dir.push((name, shape));
        }
        let mut blocks = Vec::with_capacity(dir.len());
        for (name, shape) in dir {
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad("shape overflow"))?;
            let raw = cur
                .take(len.checked_mul(4).ok_or_else(|| bad("shape overflow"))?)
                .ok_or_else(|| bad("truncated values"))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blocks.push(Block::new(name, shape, values)?);
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        ParameterSet::new(blocks)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FFCKPT01";

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
