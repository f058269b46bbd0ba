//! Parameterised flow generator standing in for captured traffic.
//!
//! Each family draws its packet count from a geometric law, packet lengths
//! from a Gaussian mixture (rounded, clamped to `[0, 1514]`), and gaps from
//! an exponential law.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, Exp, Geometric, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use super::records::FlowRecord;
use crate::error::{Error, Result};
use crate::ingest::{FlowKey, FlowSequence, Label, PacketRecord, Protocol, HEAD_PACKETS};
use crate::nn::RngState;

pub const MAX_PACKET_LEN: f64 = 1514.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub name: String,
    pub label: Label,
    pub flows: usize,
    /// Mean packets per flow, at least 1.
    pub mean_packets: f64,
    pub lengths: Vec<LengthComponent>,
    /// Mean inter-arrival gap in seconds.
    pub mean_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub families: Vec<FamilySpec>,
}

impl FamilySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(format!("family `{}`: {what}", self.name)));
        if self.name.is_empty() {
            return Err(Error::Config("family with empty name".into()));
        }
        if !(self.mean_packets >= 1.0 && self.mean_packets.is_finite()) {
            return bad(format!("mean_packets must be >= 1, got {}", self.mean_packets));
        }
        if !(self.mean_gap > 0.0 && self.mean_gap.is_finite()) {
            return bad(format!("mean_gap must be > 0, got {}", self.mean_gap));
        }
        if self.lengths.is_empty() {
            return bad("no length components".into());
        }
        for c in &self.lengths {
            if !(c.weight > 0.0 && c.weight.is_finite()) || !(c.std >= 0.0 && c.std.is_finite()) || !c.mean.is_finite() {
                return bad(format!("bad length component {c:?}"));
            }
        }
        Ok(())
    }

    /// Weighted mean of the component means (before clamping).
    pub fn mean_length(&self) -> f64 {
        let w: f64 = self.lengths.iter().map(|c| c.weight).sum();
        self.lengths.iter().map(|c| c.weight * c.mean).sum::<f64>() / w
    }

    /// Standard deviation of the unclamped mixture.
    pub fn std_length(&self) -> f64 {
        let w: f64 = self.lengths.iter().map(|c| c.weight).sum();
        let m = self.mean_length();
        let second: f64 = self
            .lengths
            .iter()
            .map(|c| c.weight * (c.std * c.std + c.mean * c.mean))
            .sum::<f64>()
            / w;
        (second - m * m).max(0.0).sqrt()
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for f in &self.families {
            f.validate()?;
            if !names.insert(f.name.as_str()) {
                return Err(Error::Config(format!("duplicate family `{}`", f.name)));
            }
        }
        for label in [Label::Benign, Label::Malicious] {
            if !self.families.iter().any(|f| f.label == label) {
                return Err(Error::Config(format!("spec needs at least one {label:?} family")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SynthSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn family(&self, name: &str) -> Option<&FamilySpec> {
        self.families.iter().find(|f| f.name == name)
    }
}

struct FamilySampler {
    count: Geometric,
    component: WeightedIndex<f64>,
    normals: Vec<Normal<f64>>,
    gap: Exp<f64>,
}

impl FamilySampler {
    fn new(f: &FamilySpec) -> Result<Self> {
        let invalid = |e: String| Error::Config(format!("family `{}`: {e}", f.name));
        Ok(FamilySampler {
            count: Geometric::new(1.0 / f.mean_packets).map_err(|e| invalid(e.to_string()))?,
            component: WeightedIndex::new(f.lengths.iter().map(|c| c.weight)).map_err(|e| invalid(e.to_string()))?,
            normals: f
                .lengths
                .iter()
                .map(|c| Normal::new(c.mean, c.std).map_err(|e| invalid(e.to_string())))
                .collect::<Result<_>>()?,
            gap: Exp::new(1.0 / f.mean_gap).map_err(|e| invalid(e.to_string()))?,
        })
    }

    fn length<R: Rng>(&self, rng: &mut R) -> u32 {
        let c = self.component.sample(rng);
        self.normals[c].sample(rng).round().clamp(0.0, MAX_PACKET_LEN) as u32
    }
}

fn synthetic_key(family: usize, index: usize) -> FlowKey {
    FlowKey {
        src_ip: format!("10.{}.{}.{}", family % 256, (index >> 8) & 255, index & 255),
        dst_ip: format!("192.0.2.{}", family % 256),
        src_port: 1024 + ((index >> 16) % 64000) as u16,
        dst_port: 443,
        protocol: Protocol::Tcp,
    }
}

/// Packets of one synthetic flow; only the head packets are materialised
/// since nothing downstream looks further.
fn sample_flow(sampler: &FamilySampler, label: Label, key: FlowKey, rng: &mut RngState) -> FlowSequence {
    let total = 1 + sampler.count.sample(rng);
    let n = total.min(HEAD_PACKETS as u64) as usize;
    let mut t = 0.0;
    let mut packets = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            t += sampler.gap.sample(rng);
        }
        packets.push(PacketRecord {
            timestamp: t,
            src_ip: key.src_ip.clone(),
            dst_ip: key.dst_ip.clone(),
            src_port: key.src_port,
            dst_port: key.dst_port,
            protocol: key.protocol,
            length: sampler.length(rng),
            label: Some(label),
        });
    }
    FlowSequence {
        key,
        packets,
        label: Some(label),
    }
}

/// All families in spec order, each family's flows contiguous.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Vec<FlowRecord>> {
    spec.validate()?;
    let mut rng = RngState::seeded(seed);
    let mut out = Vec::with_capacity(spec.families.iter().map(|f| f.flows).sum());
    for (fi, f) in spec.families.iter().enumerate() {
        let sampler = FamilySampler::new(f)?;
        for i in 0..f.flows {
            let flow = sample_flow(&sampler, f.label, synthetic_key(fi, i), &mut rng);
            out.push(FlowRecord::from_flow(&flow, Some(f.name.clone()))?);
        }
    }
    Ok(out)
}
