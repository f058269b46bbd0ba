//! Packet-log ingestion, five-tuple flow assembly and the per-flow
//! `(l, d, t_m)` sequence representation.

mod pcap;

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use pcap::parse_pcap;

/// Number of head packets kept per flow.
pub const HEAD_PACKETS: usize = 50;
/// Number of real length buckets; index `LENGTH_BUCKETS` is the padding sentinel.
pub const LENGTH_BUCKETS: usize = 64;
pub const PAD_BUCKET: usize = LENGTH_BUCKETS;
pub const BUCKET_WIDTH: u32 = 24;
/// Duration cap (seconds) used by the log normalisation.
pub const DURATION_SCALE: f64 = 3600.0;
/// Inter-arrival cap (seconds) used by the log normalisation.
pub const GAP_SCALE: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Tcp,
    Udp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Benign = 0,
    Malicious = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Benign),
            1 => Some(Label::Malicious),
            _ => None,
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Label::from_index(v as usize).ok_or_else(|| format!("label must be 0 or 1, got {v}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PacketRecord {
    pub timestamp: f64,
    pub src_ip: String,
    pub dst_ip: String,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
    pub length: u32,
    /// Ground-truth label carried by annotated logs; never fed to the model.
    pub label: Option<Label>,
}

impl PacketRecord {
    pub fn key(&self) -> FlowKey {
        FlowKey {
            src_ip: self.src_ip.clone(),
            dst_ip: self.dst_ip.clone(),
            src_port: self.src_port,
            dst_port: self.dst_port,
            protocol: self.protocol,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !self.timestamp.is_finite() || self.timestamp < 0.0 {
            return Err(format!("timestamp {} not finite and >= 0", self.timestamp));
        }
        if self.length > u16::MAX as u32 {
            return Err(format!("length {} exceeds 65535", self.length));
        }
        Ok(())
    }
}

/// Directional five-tuple. `a -> b` and `b -> a` are distinct flows.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    #[serde(rename = "src")]
    pub src_ip: String,
    #[serde(rename = "dst")]
    pub dst_ip: String,
    #[serde(rename = "sport")]
    pub src_port: u16,
    #[serde(rename = "dport")]
    pub dst_port: u16,
    #[serde(rename = "proto")]
    pub protocol: Protocol,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSequence {
    pub key: FlowKey,
    pub packets: Vec<PacketRecord>,
    pub label: Option<Label>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSequence {
    /// Head-packet lengths, at most `HEAD_PACKETS` entries.
    pub lengths: Vec<u32>,
    /// `t_last - t_first` over the retained packets, seconds.
    pub duration: f64,
    /// Mean inter-arrival gap over the retained packets, seconds.
    pub mean_interval: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSequence {
    pub buckets: Vec<usize>,
    pub mask: Vec<bool>,
    pub d_norm: f64,
    pub t_m_norm: f64,
}

impl NormalizedSequence {
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogFormat {
    Jsonl,
    Pcap,
}

impl std::str::FromStr for LogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(LogFormat::Jsonl),
            "pcap" => Ok(LogFormat::Pcap),
            other => Err(Error::Invalid(format!("unknown log format `{other}`"))),
        }
    }
}

/// A record that could not be parsed. `position` is a 1-based line number
/// for JSONL and a byte offset for PCAP.
#[derive(Clone, Debug, PartialEq)]
pub struct SkippedRecord {
    pub position: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedLog {
    pub records: Vec<PacketRecord>,
    pub malformed: Vec<SkippedRecord>,
    /// Well-formed packets dropped because they are not IPv4 TCP/UDP.
    pub unsupported: u64,
}

pub fn parse_packet_log<R: Read>(source: R, format: LogFormat) -> Result<ParsedLog> {
    match format {
        LogFormat::Jsonl => parse_jsonl(source),
        LogFormat::Pcap => parse_pcap(source),
    }
}

#[derive(Deserialize)]
struct JsonPacket {
    ts: f64,
    src: String,
    dst: String,
    sport: u16,
    dport: u16,
    proto: String,
    len: u32,
    #[serde(default)]
    label: Option<Label>,
}

pub fn parse_jsonl<R: Read>(source: R) -> Result<ParsedLog> {
    let mut out = ParsedLog::default();
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let line = line?;
        let lineno = i as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let pkt: JsonPacket = match serde_json::from_str(&line) {
            Ok(p) => p,
            Err(e) => {
                out.malformed.push(SkippedRecord {
                    position: lineno,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let protocol = match pkt.proto.to_ascii_lowercase().as_str() {
            "tcp" => Protocol::Tcp,
            "udp" => Protocol::Udp,
            _ => {
                out.unsupported += 1;
                continue;
            }
        };
        let rec = PacketRecord {
            timestamp: pkt.ts,
            src_ip: pkt.src,
            dst_ip: pkt.dst,
            src_port: pkt.sport,
            dst_port: pkt.dport,
            protocol,
            length: pkt.len,
            label: pkt.label,
        };
        match rec.validate() {
            Ok(()) => out.records.push(rec),
            Err(reason) => out.malformed.push(SkippedRecord {
                position: lineno,
                reason,
            }),
        }
    }
    Ok(out)
}

/// Groups packets by directional five-tuple. Flows come out in order of first
/// appearance; packets inside a flow are stably sorted by timestamp.
pub fn assemble_flows(packets: Vec<PacketRecord>) -> Vec<FlowSequence> {
    let mut index: HashMap<FlowKey, usize> = HashMap::new();
    let mut flows: Vec<FlowSequence> = Vec::new();
    for pkt in packets {
        let key = pkt.key();
        let slot = match index.get(&key) {
            Some(&i) => i,
            None => {
                index.insert(key.clone(), flows.len());
                flows.push(FlowSequence {
                    key,
                    packets: Vec::new(),
                    label: None,
                });
                flows.len() - 1
            }
        };
        flows[slot].packets.push(pkt);
    }
    for flow in &mut flows {
        // sort_by is stable, so ties keep input order
        flow.packets
            .sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        flow.label = flow
            .packets
            .iter()
            .filter_map(|p| p.label)
            .max_by_key(|l| l.index());
    }
    flows
}

pub fn derive_raw_sequence(flow: &FlowSequence) -> Result<RawSequence> {
    let head = &flow.packets[..flow.packets.len().min(HEAD_PACKETS)];
    let (first, last) = match (head.first(), head.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::EmptyFlow),
    };
    let duration = (last.timestamp - first.timestamp).max(0.0);
    let mean_interval = if head.len() > 1 {
        duration / (head.len() - 1) as f64
    } else {
        0.0
    };
    Ok(RawSequence {
        lengths: head.iter().map(|p| p.length).collect(),
        duration,
        mean_interval,
    })
}

pub fn length_bucket(length: u32) -> usize {
    ((length / BUCKET_WIDTH) as usize).min(LENGTH_BUCKETS - 1)
}

pub fn normalize_sequence(raw: &RawSequence) -> NormalizedSequence {
    let mut buckets = vec![PAD_BUCKET; HEAD_PACKETS];
    let mut mask = vec![false; HEAD_PACKETS];
    for (i, &len) in raw.lengths.iter().take(HEAD_PACKETS).enumerate() {
        buckets[i] = length_bucket(len);
        mask[i] = true;
    }
    NormalizedSequence {
        buckets,
        mask,
        d_norm: log_scale(raw.duration, DURATION_SCALE),
        t_m_norm: log_scale(raw.mean_interval, GAP_SCALE),
    }
}

fn log_scale(v: f64, cap: f64) -> f64 {
    let v = if v.is_finite() { v.max(0.0) } else { 0.0 };
    v.ln_1p() / cap.ln_1p()
}
