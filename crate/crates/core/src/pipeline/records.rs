use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{derive_raw_sequence, normalize_sequence, FlowKey, FlowSequence, Label, NormalizedSequence};

/// One flow as written to and read from `.jsonl` files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub key: FlowKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(default)]
    pub label: Option<Label>,
    pub l: Vec<u32>,
    pub d: f64,
    pub t_m: f64,
    pub buckets: Vec<usize>,
    pub mask: Vec<bool>,
    pub d_norm: f64,
    pub t_m_norm: f64,
}

impl FlowRecord {
    pub fn from_flow(flow: &FlowSequence, family: Option<String>) -> Result<Self> {
        let raw = derive_raw_sequence(flow)?;
        let norm = normalize_sequence(&raw);
        Ok(FlowRecord {
            key: flow.key.clone(),
            family,
            label: flow.label,
            l: raw.lengths,
            d: raw.duration,
            t_m: raw.mean_interval,
            buckets: norm.buckets,
            mask: norm.mask,
            d_norm: norm.d_norm,
            t_m_norm: norm.t_m_norm,
        })
    }

    pub fn sequence(&self) -> NormalizedSequence {
        NormalizedSequence {
            buckets: self.buckets.clone(),
            mask: self.mask.clone(),
            d_norm: self.d_norm,
            t_m_norm: self.t_m_norm,
        }
    }

    pub fn labeled(&self) -> Result<Label> {
        self.label
            .ok_or_else(|| Error::Invalid(format!("flow {:?} has no label", self.key)))
    }

    fn check(&self) -> Result<()> {
        let n = crate::ingest::HEAD_PACKETS;
        if self.buckets.len() != n || self.mask.len() != n {
            return Err(Error::Invalid(format!(
                "flow record needs {n} buckets and mask entries, got {} and {}",
                self.buckets.len(),
                self.mask.len()
            )));
        }
        if self.buckets.iter().zip(&self.mask).any(|(b, m)| *b > crate::ingest::PAD_BUCKET || (*m && *b == crate::ingest::PAD_BUCKET)) {
            return Err(Error::Invalid("bucket out of range".into()));
        }
        if !(self.d_norm.is_finite() && self.t_m_norm.is_finite()) {
            return Err(Error::Invalid("non-finite timing feature".into()));
        }
        Ok(())
    }
}

pub fn write_flow_records<W: Write>(mut out: W, records: &[FlowRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads one record per non-blank line; the first bad line aborts with its
/// line number.
pub fn read_flow_records<R: Read>(source: R) -> Result<Vec<FlowRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FlowRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Invalid(format!("flow record line {}: {e}", i + 1)))?;
        rec.check()
            .map_err(|e| Error::Invalid(format!("flow record line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
