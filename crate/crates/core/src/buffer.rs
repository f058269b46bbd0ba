//! Fixed-capacity replay memory maintained by reservoir sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::DetectorInput;
use crate::ingest::Label;
use crate::nn::RngState;

/// A replayed sample: detector input, label, and the detector's logits at
/// the moment the sample was inserted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub x: DetectorInput,
    pub y: Label,
    pub z: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: Vec<BufferEntry>,
    seen: u64,
}

const MAGIC: &[u8; 4] = b"RBUF";

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            entries: Vec::with_capacity(capacity),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    /// Reservoir step. While filling, every offer is kept; afterwards the
    /// `n`-th offer (0-based) replaces a uniformly chosen slot with
    /// probability `capacity / (n + 1)`.
    pub fn offer(&mut self, entry: BufferEntry, rng: &mut RngState) -> bool {
        let accepted = if self.entries.len() < self.capacity {
            self.entries.push(entry);
            true
        } else if self.capacity == 0 {
            false
        } else {
            let j = rng.gen_range(0..=self.seen);
            if j < self.capacity as u64 {
                self.entries[j as usize] = entry;
                true
            } else {
                false
            }
        };
        self.seen += 1;
        accepted
    }

    /// Two independent uniform with-replacement draws of `k` entries each.
    /// An empty buffer yields two empty batches.
    pub fn sample_two_batches(&self, k: usize, rng: &mut RngState) -> (Vec<&BufferEntry>, Vec<&BufferEntry>) {
        if self.entries.is_empty() || k == 0 {
            return (Vec::new(), Vec::new());
        }
        let n = self.entries.len();
        let draw = |rng: &mut RngState| -> Vec<&BufferEntry> {
            (0..k).map(|_| &self.entries[rng.gen_range(0..n)]).collect()
        };
        let first = draw(rng);
        let second = draw(rng);
        (first, second)
    }

    /// Little-endian binary form: magic, capacity, seen, count, input width,
    /// then per entry the inputs, the label byte and both logits.
    pub fn to_bytes(&self) -> Vec<u8> {
        let width = self.entries.first().map_or(0, |e| e.x.len());
        let mut out = Vec::with_capacity(36 + self.entries.len() * (8 * (width + 2) + 1));
        out.extend_from_slice(MAGIC);
        for v in [self.capacity as u64, self.seen, self.entries.len() as u64, width as u64] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for e in &self.entries {
            for v in e.x.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(e.y.into());
            for v in e.z {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Checkpoint(format!("replay buffer: {what}"));
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| corrupt("truncated"))? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut header = [0u64; 4];
        for h in &mut header {
            *h = cur.u64().ok_or_else(|| corrupt("truncated header"))?;
        }
        let [capacity, seen, count, width] = header;
        if count > capacity || count != capacity.min(seen) {
            return Err(corrupt("entry count inconsistent with capacity and seen"));
        }
        let per_entry = width
            .checked_mul(8)
            .and_then(|w| w.checked_add(17))
            .ok_or_else(|| corrupt("width overflow"))?;
        if count.checked_mul(per_entry) != Some((bytes.len() - cur.pos) as u64) {
            return Err(corrupt("payload length mismatch"));
        }
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let x: Vec<f64> = (0..width).map(|_| cur.f64().unwrap()).collect();
            let y = Label::try_from(cur.take(1).unwrap()[0]).map_err(|e| corrupt(&e))?;
            let z = [cur.f64().unwrap(), cur.f64().unwrap()];
            if !x.iter().chain(&z).all(|v| v.is_finite()) {
                return Err(corrupt("non-finite value"));
            }
            entries.push(BufferEntry {
                x: DetectorInput(x),
                y,
                z,
            });
        }
        Ok(ReplayBuffer {
            capacity: capacity as usize,
            entries,
            seen,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}
