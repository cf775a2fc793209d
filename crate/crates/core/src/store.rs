//! The append-only set of self-generated pseudo-negatives and its file format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::ByteReader;
use crate::tensor::Tensor;

/// One synthesized sample. `class_tag` is −1 for binary models and −k for
/// class k (1-based) in multi-class models.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoNegative {
    pub sample: Tensor,
    pub class_tag: i32,
    pub round: u32,
}

impl PseudoNegative {
    /// 0-based index of the head this sample is a negative for.
    pub fn head(&self) -> usize {
        (self.class_tag.unsigned_abs() as usize).saturating_sub(1)
    }
}

pub fn tag_for_class(class: usize) -> i32 {
    -(class as i32 + 1)
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PseudoNegativeStore {
    entries: Vec<PseudoNegative>,
    /// Samples added per round (per class in multi-class mode).
    pub per_round: usize,
}

impl PseudoNegativeStore {
    pub fn new(per_round: usize) -> Self {
        PseudoNegativeStore { entries: Vec::new(), per_round }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PseudoNegative] {
        &self.entries
    }

    /// Appends a batch for `round`. Existing entries are never touched.
    pub fn extend(&mut self, round: u32, class_tag: i32, samples: impl IntoIterator<Item = Tensor>) {
        self.entries.extend(samples.into_iter().map(|sample| PseudoNegative { sample, class_tag, round }));
    }

    pub fn samples(&self) -> Vec<&Tensor> {
        self.entries.iter().map(|e| &e.sample).collect()
    }

    pub fn from_round(&self, round: u32) -> impl Iterator<Item = &PseudoNegative> {
        self.entries.iter().filter(move |e| e.round == round)
    }
}

const STORE_MAGIC: &[u8; 8] = b"ICNSTORE";
pub const STORE_VERSION: u32 = 1;

/// Magic, version, per-round count (u64), entry count (u64), then per entry:
/// round (u32), class tag (i32), rank (u32), dims (u32 each) and the
/// little-endian f64 payload.
pub fn encode_store(store: &PseudoNegativeStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(STORE_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.per_round as u64).to_le_bytes());
    out.extend_from_slice(&(store.entries.len() as u64).to_le_bytes());
    for e in &store.entries {
        out.extend_from_slice(&e.round.to_le_bytes());
        out.extend_from_slice(&e.class_tag.to_le_bytes());
        out.extend_from_slice(&(e.sample.shape().len() as u32).to_le_bytes());
        for &d in e.sample.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.sample.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_store(bytes: &[u8]) -> Result<PseudoNegativeStore> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(8)? != STORE_MAGIC {
        return Err(Error::Format("not a pseudo-negative store (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != STORE_VERSION {
        return Err(Error::Version { expected: STORE_VERSION, found: version });
    }
    let per_round = r.u64()? as usize;
    let count = r.u64()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let round = r.u32()?;
        let class_tag = r.i32()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        entries.push(PseudoNegative { sample: Tensor::new(shape, data)?, class_tag, round });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after store".into()));
    }
    Ok(PseudoNegativeStore { entries, per_round })
}

pub fn save_store(store: &PseudoNegativeStore, path: &Path) -> Result<()> {
    fs::write(path, encode_store(store)).map_err(|e| Error::io(path, e))
}

pub fn load_store(path: &Path) -> Result<PseudoNegativeStore> {
    decode_store(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Writes then reads back a store.
pub fn store_roundtrip(store: &PseudoNegativeStore, path: &Path) -> Result<PseudoNegativeStore> {
    save_store(store, path)?;
    load_store(path)
}
