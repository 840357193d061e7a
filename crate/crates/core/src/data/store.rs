//! Binary embedding store (`ADJE`).
//!
//! Little-endian layout:
//!
//! ```text
//! magic  "ADJE"
//! u32    version (1)
//! u32    d
//! u64    record count
//! per record:
//!   u64  seq_id
//!   u32  L
//!   u32  prompt_len
//!   f32  L × d values, row-major
//! ```
//!
//! Sequences load unpadded with the response covering rows `prompt_len..L`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sequence::TokenSequence;
use crate::tensor::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"ADJE";
pub const EMBEDDING_VERSION: u32 = 1;

/// Immutable map from sequence id to its embedding sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingStore {
    d: usize,
    seqs: BTreeMap<u64, TokenSequence>,
}

impl EmbeddingStore {
    pub fn new(d: usize) -> Self {
        EmbeddingStore {
            d,
            seqs: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&TokenSequence> {
        self.seqs.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.seqs.keys().copied()
    }

    /// Inserts an unpadded sequence. Values are rounded to `f32` so that the
    /// in-memory store matches what a save/load round trip produces.
    pub fn insert(&mut self, id: u64, seq: TokenSequence) -> Result<()> {
        if seq.dim() != self.d {
            return Err(Error::Dimension {
                name: format!("sequence {id}"),
                expected: vec![seq.len(), self.d],
                found: seq.embeddings().dims().to_vec(),
            });
        }
        if seq.real_len() != seq.len() || seq.response_len() + seq.prompt_len() != seq.len() {
            return Err(Error::data(format!(
                "sequence {id}: stored sequences must be unpadded prompt+response"
            )));
        }
        if self.seqs.contains_key(&id) {
            return Err(Error::data(format!("duplicate sequence id {id}")));
        }
        let rounded: Vec<f64> = seq.embeddings().data().iter().map(|&v| v as f32 as f64).collect();
        let emb = Tensor::new(seq.embeddings().dims().to_vec(), rounded)?;
        self.seqs.insert(id, TokenSequence::from_prompt_response(emb, seq.prompt_len())?);
        Ok(())
    }

    /// Moves every sequence of `other` into `self`.
    pub fn merge(&mut self, other: EmbeddingStore) -> Result<()> {
        if other.d != self.d {
            return Err(Error::Config(format!("cannot merge stores with d {} and {}", self.d, other.d)));
        }
        for (id, seq) in other.seqs {
            if self.seqs.insert(id, seq).is_some() {
                return Err(Error::data(format!("duplicate sequence id {id}")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.seqs.len() as u64).to_le_bytes());
        for (&id, seq) in &self.seqs {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
            out.extend_from_slice(&(seq.prompt_len() as u32).to_le_bytes());
            for &v in seq.embeddings().data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Parses a store; `expected_d`, when given, must match the header.
    pub fn from_bytes(bytes: &[u8], expected_d: Option<usize>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != EMBEDDING_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected \"ADJE\"".into(),
            });
        }
        let version = r.u32()?;
        if version != EMBEDDING_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let d = r.u32()? as usize;
        if d == 0 {
            return Err(Error::Format {
                offset: 8,
                msg: "d must be positive".into(),
            });
        }
        if let Some(want) = expected_d.filter(|&w| w != d) {
            return Err(Error::Format {
                offset: 8,
                msg: format!("file has d = {d}, expected {want}"),
            });
        }
        let count = r.u64()?;
        let mut store = EmbeddingStore::new(d);
        for _ in 0..count {
            let start = r.pos as u64;
            let id = r.u64()?;
            let len = r.u32()? as usize;
            let prompt_len = r.u32()? as usize;
            if len == 0 || prompt_len == 0 || prompt_len >= len {
                return Err(Error::Data {
                    line: None,
                    msg: format!(
                        "record {id} at byte {start}: prompt_len {prompt_len} leaves no response in length {len}"
                    ),
                });
            }
            let raw = r.take(len * d * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let seq = TokenSequence::from_prompt_response(Tensor::new(vec![len, d], data)?, prompt_len)?;
            if store.seqs.insert(id, seq).is_some() {
                return Err(Error::Format {
                    offset: start,
                    msg: format!("duplicate sequence id {id}"),
                });
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>, expected_d: Option<usize>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected_d)
    }
}

/// Byte cursor reporting truncation with the failing offset.
pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated: needed {n} bytes, {} left", self.remaining()),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_record() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"ADJE");
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&1u64.to_le_bytes());
        b.extend_from_slice(&42u64.to_le_bytes());
        b.extend_from_slice(&4u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        for v in 0..8 {
            b.extend_from_slice(&(v as f32 * 0.5).to_le_bytes());
        }
        b
    }

    #[test]
    fn reads_single_record() {
        let s = EmbeddingStore::from_bytes(&one_record(), Some(2)).unwrap();
        assert_eq!(s.len(), 1);
        let seq = s.get(42).unwrap();
        assert_eq!(seq.embeddings().dims(), &[4, 2]);
        assert_eq!(seq.prompt_len(), 1);
        assert_eq!(seq.response_len(), 3);
        assert!(seq.pad_mask().iter().all(|&p| p));
    }

    #[test]
    fn rejects_prompt_covering_everything() {
        let mut b = one_record();
        b[32..36].copy_from_slice(&4u32.to_le_bytes());
        assert!(matches!(EmbeddingStore::from_bytes(&b, None), Err(Error::Data { .. })));
    }

    #[test]
    fn rejects_bad_magic_and_dim() {
        let mut b = one_record();
        assert!(matches!(EmbeddingStore::from_bytes(&b, Some(3)), Err(Error::Format { offset: 8, .. })));
        b[0] = b'X';
        assert!(matches!(EmbeddingStore::from_bytes(&b, None), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_names_offset() {
        let b = one_record();
        let err = EmbeddingStore::from_bytes(&b[..b.len() - 3], None).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 36),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn byte_round_trip() {
        let s = EmbeddingStore::from_bytes(&one_record(), None).unwrap();
        assert_eq!(s.to_bytes(), one_record());
    }
}
