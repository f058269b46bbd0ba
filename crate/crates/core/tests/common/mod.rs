#![allow(dead_code)]

use etguard_core::ingest::{FlowKey, FlowSequence, Label, PacketRecord, Protocol};
use rand::Rng;

pub fn packet(key: &FlowKey, ts: f64, length: u32, label: Option<Label>) -> PacketRecord {
    PacketRecord {
        timestamp: ts,
        src_ip: key.src_ip.clone(),
        dst_ip: key.dst_ip.clone(),
        src_port: key.src_port,
        dst_port: key.dst_port,
        protocol: key.protocol,
        length,
        label,
    }
}

pub fn key(i: usize) -> FlowKey {
    // keys 2k and 2k+1 are the two directions of one conversation
    let (a, b) = (format!("10.0.0.{}", i / 2), "10.0.1.1".to_string());
    let (src_ip, dst_ip, src_port, dst_port) = if i % 2 == 0 { (a, b, 40000, 443) } else { (b, a, 443, 40000) };
    FlowKey {
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        protocol: if i % 3 == 0 { Protocol::Udp } else { Protocol::Tcp },
    }
}

/// Random log over at most `keys` five-tuples; timestamps come from a small
/// grid so ties are common.
pub fn random_log<R: Rng>(rng: &mut R, packets: usize, keys: usize) -> Vec<PacketRecord> {
    let pool: Vec<FlowKey> = (0..keys.max(1)).map(key).collect();
    (0..packets)
        .map(|_| {
            let k = &pool[rng.gen_range(0..pool.len())];
            let ts = rng.gen_range(0..200) as f64 * 0.25;
            let label = match rng.gen_range(0..3) {
                0 => None,
                1 => Some(Label::Benign),
                _ => Some(Label::Malicious),
            };
            packet(k, ts, rng.gen_range(0..2000), label)
        })
        .collect()
}

/// Filter by key in first-appearance order, then insertion-sort by
/// timestamp (stable by construction).
pub fn brute_force_flows(packets: &[PacketRecord]) -> Vec<FlowSequence> {
    let mut keys: Vec<FlowKey> = Vec::new();
    for p in packets {
        let k = p.key();
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|k| {
            let mut sorted: Vec<PacketRecord> = Vec::new();
            for p in packets.iter().filter(|p| p.key() == k) {
                let pos = sorted.iter().position(|q| q.timestamp > p.timestamp).unwrap_or(sorted.len());
                sorted.insert(pos, p.clone());
            }
            let label = if sorted.iter().any(|p| p.label == Some(Label::Malicious)) {
                Some(Label::Malicious)
            } else if sorted.iter().any(|p| p.label == Some(Label::Benign)) {
                Some(Label::Benign)
            } else {
                None
            };
            FlowSequence {
                key: k,
                packets: sorted,
                label,
            }
        })
        .collect()
}

/// Uniform `p` on the simplex and a uniformly oriented unit `Δ` with zero
/// sum, redrawn until `p ± eps_max·Δ` are both strictly positive.
pub fn simplex_pair<R: Rng>(dim: usize, eps_max: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    use rand_distr::{Distribution, Exp1, StandardNormal};
    loop {
        let e: Vec<f64> = (0..dim).map(|_| Exp1.sample(rng)).collect();
        let s: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|x| x / s).collect();
        let mut d: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let m = d.iter().sum::<f64>() / dim as f64;
        d.iter_mut().for_each(|x| *x -= m);
        let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        d.iter_mut().for_each(|x| *x /= n);
        if p.iter().zip(&d).all(|(a, b)| *a > eps_max * b.abs()) {
            return (p, d);
        }
    }
}
