//! Per-subsequence store of memory tokens with optional FIFO capacity.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::{Real, Tensor};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Label,
    Boundary,
}

/// A stored token. The vector is a detached copy; nothing refers back to the
/// computation that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryToken {
    pub vector: Vec<f32>,
    pub anchor: usize,
    pub iteration: usize,
    pub kind: TokenKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    subsequence_id: String,
    dim: usize,
    capacity: Option<usize>,
    tokens: VecDeque<MemoryToken>,
}

impl MemoryBank {
    pub fn new(subsequence_id: impl Into<String>, dim: usize, capacity: Option<usize>) -> Result<Self> {
        if dim == 0 || capacity == Some(0) {
            return Err(Error::Config(format!(
                "memory bank needs dim >= 1 and capacity >= 1, got dim {dim}, capacity {capacity:?}"
            )));
        }
        Ok(Self {
            subsequence_id: subsequence_id.into(),
            dim,
            capacity,
            tokens: VecDeque::new(),
        })
    }

    pub fn subsequence_id(&self) -> &str {
        &self.subsequence_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> impl ExactSizeIterator<Item = &MemoryToken> {
        self.tokens.iter()
    }

    /// Append in order, evicting the oldest tokens beyond capacity. The
    /// whole write is rejected if any token has the wrong dimension.
    pub fn write(&mut self, new_tokens: Vec<MemoryToken>) -> Result<()> {
        if let Some(t) = new_tokens.iter().find(|t| t.vector.len() != self.dim) {
            return Err(Error::Shape(format!(
                "token of dimension {} written to a bank of dimension {}",
                t.vector.len(),
                self.dim
            )));
        }
        self.tokens.extend(new_tokens);
        if let Some(c) = self.capacity {
            while self.tokens.len() > c {
                self.tokens.pop_front();
            }
        }
        Ok(())
    }

    /// Stack the token vectors in insertion order; `None` for an empty bank.
    pub fn read_all<R: Real>(&self) -> Option<Tensor<R>> {
        if self.tokens.is_empty() {
            return None;
        }
        let data = self
            .tokens
            .iter()
            .flat_map(|t| t.vector.iter().map(|&v| R::of(v as f64)))
            .collect();
        Some(Tensor::from_vec(self.tokens.len(), self.dim, data).expect("rows of bank dimension"))
    }

    pub fn reset(&mut self) {
        self.tokens.clear();
    }

    pub fn snapshot(&self) -> BankSnapshot {
        let mut block = Vec::with_capacity(self.tokens.len() * self.dim * 4);
        for t in &self.tokens {
            for v in &t.vector {
                block.extend_from_slice(&v.to_le_bytes());
            }
        }
        BankSnapshot {
            manifest: SnapshotManifest {
                version: SNAPSHOT_VERSION,
                subsequence_id: self.subsequence_id.clone(),
                count: self.tokens.len(),
                dim: self.dim,
                capacity: self.capacity,
                anchors: self.tokens.iter().map(|t| t.anchor).collect(),
                iterations: self.tokens.iter().map(|t| t.iteration).collect(),
                kinds: self.tokens.iter().map(|t| t.kind).collect(),
            },
            block,
        }
    }

    /// Rebuild a bank from a snapshot. `dim` is the dimension the caller
    /// expects, normally the model's `d_model`.
    pub fn restore(snapshot: &BankSnapshot, dim: usize) -> Result<Self> {
        let m = &snapshot.manifest;
        if m.version != SNAPSHOT_VERSION {
            return Err(Error::Version {
                found: m.version,
                expected: SNAPSHOT_VERSION,
            });
        }
        if m.dim != dim {
            return Err(Error::Shape(format!(
                "snapshot has token dimension {}, expected {dim}",
                m.dim
            )));
        }
        if m.anchors.len() != m.count
            || m.iterations.len() != m.count
            || m.kinds.len() != m.count
            || snapshot.block.len() != m.count * m.dim * 4
        {
            return Err(Error::Data(format!(
                "snapshot of {} tokens is inconsistent ({} bytes)",
                m.count,
                snapshot.block.len()
            )));
        }
        let mut bank = Self::new(m.subsequence_id.clone(), dim, m.capacity)?;
        let floats: Vec<f32> = snapshot
            .block
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        bank.tokens = (0..m.count)
            .map(|i| MemoryToken {
                vector: floats[i * dim..(i + 1) * dim].to_vec(),
                anchor: m.anchors[i],
                iteration: m.iterations[i],
                kind: m.kinds[i],
            })
            .collect();
        Ok(bank)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub version: u32,
    pub subsequence_id: String,
    pub count: usize,
    pub dim: usize,
    pub capacity: Option<usize>,
    pub anchors: Vec<usize>,
    pub iterations: Vec<usize>,
    pub kinds: Vec<TokenKind>,
}

/// JSON manifest plus the raw little-endian `f32` token block.
#[derive(Clone, Debug, PartialEq)]
pub struct BankSnapshot {
    pub manifest: SnapshotManifest,
    pub block: Vec<u8>,
}

impl BankSnapshot {
    /// One JSON line, a newline, then the token block.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.manifest)?;
        out.push(b'\n');
        out.extend_from_slice(&self.block);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Data("snapshot has no manifest line".into()))?;
        Ok(Self {
            manifest: serde_json::from_slice(&bytes[..split])?,
            block: bytes[split + 1..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(x: f32, anchor: usize) -> MemoryToken {
        MemoryToken {
            vector: vec![x, -x],
            anchor,
            iteration: 1,
            kind: TokenKind::Label,
        }
    }

    #[test]
    fn append_and_read_in_order() {
        let mut b = MemoryBank::new("s/0", 2, None).unwrap();
        assert!(b.read_all::<f32>().is_none());
        b.write((0..3).map(|i| tok(i as f32, i)).collect()).unwrap();
        b.write((3..7).map(|i| tok(i as f32, i)).collect()).unwrap();
        let m = b.read_all::<f32>().unwrap();
        assert_eq!(m.shape(), [7, 2]);
        assert_eq!(m.row(0), &[0.0, -0.0]);
        assert_eq!(m.row(6), &[6.0, -6.0]);
        b.write(vec![]).unwrap();
        assert_eq!(b.len(), 7);
    }

    #[test]
    fn fifo_eviction() {
        let mut b = MemoryBank::new("s/0", 2, Some(8)).unwrap();
        b.write((0..6).map(|i| tok(i as f32, i)).collect()).unwrap();
        b.write((6..10).map(|i| tok(i as f32, i)).collect()).unwrap();
        assert_eq!(b.len(), 8);
        let anchors: Vec<usize> = b.tokens().map(|t| t.anchor).collect();
        assert_eq!(anchors, (2..10).collect::<Vec<_>>());
    }

    #[test]
    fn dimension_mismatch_leaves_bank_unchanged() {
        let mut b = MemoryBank::new("s/0", 2, None).unwrap();
        b.write(vec![tok(1.0, 0)]).unwrap();
        let bad = MemoryToken { vector: vec![1.0], ..tok(0.0, 1) };
        assert!(matches!(b.write(vec![tok(2.0, 2), bad]), Err(Error::Shape(_))));
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn reset_keeps_capacity() {
        let mut b = MemoryBank::new("s/0", 2, Some(3)).unwrap();
        b.write(vec![tok(1.0, 0)]).unwrap();
        b.reset();
        b.reset();
        assert!(b.is_empty());
        assert_eq!(b.capacity(), Some(3));
    }

    #[test]
    fn snapshot_round_trip() {
        let mut b = MemoryBank::new("s/0", 2, Some(5)).unwrap();
        b.write(vec![tok(0.1, 3), MemoryToken { kind: TokenKind::Boundary, iteration: 2, ..tok(f32::MIN_POSITIVE, 9) }])
            .unwrap();
        let bytes = b.snapshot().to_bytes().unwrap();
        let back = MemoryBank::restore(&BankSnapshot::from_bytes(&bytes).unwrap(), 2).unwrap();
        assert_eq!(back, b);
        assert!(matches!(MemoryBank::restore(&b.snapshot(), 4), Err(Error::Shape(_))));
        let empty = MemoryBank::new("e", 2, None).unwrap();
        assert_eq!(MemoryBank::restore(&empty.snapshot(), 2).unwrap(), empty);
        let mut old = b.snapshot();
        old.manifest.version = 0;
        assert!(matches!(MemoryBank::restore(&old, 2), Err(Error::Version { .. })));
    }
}
