//! Binary checkpoint container.
//!
//! ```text
//! "ETGCKPT\0"  u32 version  u64 manifest_len  manifest (JSON)
//! extractor tensors  detector tensors  (little-endian f64, manifest order)
//! replay buffer bytes
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::engine::Engine;
use crate::buffer::ReplayBuffer;
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::extractor::AutoEncoderModel;
use crate::nn::{ParamStore, RngSnapshot, RngState};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ETGCKPT\0";
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: PipelineConfig,
    extractor: Vec<TensorEntry>,
    detector: Vec<TensorEntry>,
    rng: RngSnapshot,
    buffer_bytes: u64,
}

fn entries(store: &ParamStore) -> Vec<TensorEntry> {
    store
        .iter()
        .map(|(name, v)| TensorEntry {
            name: name.to_string(),
            shape: v.shape().to_vec(),
        })
        .collect()
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn to_bytes(engine: &Engine) -> Result<Vec<u8>> {
    let buffer = engine.buffer.to_bytes();
    let manifest = Manifest {
        version: FORMAT_VERSION,
        config: engine.config.clone(),
        extractor: entries(engine.extractor.params()),
        detector: entries(engine.detector.params()),
        rng: engine.rng.snapshot(),
        buffer_bytes: buffer.len() as u64,
    };
    let json = serde_json::to_vec(&manifest)?;
    let scalars = engine.extractor.params().num_scalars() + engine.detector.params().num_scalars();
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + 8 * scalars + buffer.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for store in [engine.extractor.params(), engine.detector.params()] {
        for (_, v) in store.iter() {
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out.extend_from_slice(&buffer);
    Ok(out)
}

fn fill(store: &mut ParamStore, listed: &[TensorEntry], bytes: &[u8], pos: &mut usize, part: &str) -> Result<()> {
    let expected = entries(store);
    if expected.len() != listed.len() {
        return Err(corrupt(format!(
            "{part}: {} tensors stored, model has {}",
            listed.len(),
            expected.len()
        )));
    }
    for (want, got) in expected.iter().zip(listed) {
        if want != got {
            return Err(corrupt(format!(
                "{part}: tensor `{}` {:?} does not match model tensor `{}` {:?}",
                got.name, got.shape, want.name, want.shape
            )));
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let chunk = bytes
            .get(*pos..*pos + 8 * n)
            .ok_or_else(|| corrupt("truncated tensor data"))?;
        for (dst, src) in store.value_mut(id).data_mut().iter_mut().zip(chunk.chunks_exact(8)) {
            *dst = f64::from_le_bytes(src.try_into().unwrap());
        }
        *pos += 8 * n;
    }
    if !store.all_finite() {
        return Err(corrupt(format!("{part}: non-finite parameter")));
    }
    Ok(())
}

/// Rebuilds an engine. With `expected`, the stored architecture must match
/// it; nothing is returned unless every check passes.
pub fn from_bytes(bytes: &[u8], expected: Option<&PipelineConfig>) -> Result<Engine> {
    if bytes.len() < HEADER_LEN {
        return Err(corrupt("truncated header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let mend = usize::try_from(mlen)
        .ok()
        .and_then(|m| HEADER_LEN.checked_add(m))
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..mend])
        .map_err(|e| corrupt(format!("unreadable manifest: {e}")))?;
    if manifest.version != version {
        return Err(corrupt("manifest version disagrees with header"));
    }
    manifest
        .config
        .validate()
        .map_err(|e| corrupt(format!("stored config invalid: {e}")))?;
    if let Some(cfg) = expected {
        if !cfg.same_architecture(&manifest.config) {
            return Err(corrupt(format!(
                "architecture mismatch: stored n={} V={} H={} B={}, config n={} V={} H={} B={}",
                manifest.config.seq_len,
                manifest.config.embed_dim,
                manifest.config.hidden,
                manifest.config.layers,
                cfg.seq_len,
                cfg.embed_dim,
                cfg.hidden,
                cfg.layers
            )));
        }
    }

    // weights are overwritten below; the generator only shapes the stores
    let mut scratch = RngState::seeded(0);
    let mut extractor = AutoEncoderModel::new(manifest.config.extractor_config(), &mut scratch)?;
    let mut detector = DetectorModel::new(manifest.config.detector_config(), &mut scratch)?;
    let tensor_bytes = 8 * (extractor.params().num_scalars() + detector.params().num_scalars());
    let expected_len = (mend as u64)
        .checked_add(tensor_bytes as u64)
        .and_then(|v| v.checked_add(manifest.buffer_bytes));
    match expected_len {
        Some(n) if n == bytes.len() as u64 => {}
        Some(n) if n > bytes.len() as u64 => return Err(corrupt("truncated file")),
        _ => return Err(corrupt("trailing bytes after checkpoint")),
    }
    let mut pos = mend;
    fill(extractor.params_mut(), &manifest.extractor, bytes, &mut pos, "extractor")?;
    fill(detector.params_mut(), &manifest.detector, bytes, &mut pos, "detector")?;
    let buffer = ReplayBuffer::from_bytes(&bytes[pos..])?;
    if buffer.capacity() != manifest.config.buffer_capacity {
        return Err(corrupt("buffer capacity disagrees with stored config"));
    }
    if let Some(e) = buffer.entries().first() {
        if e.x.len() != manifest.config.detector_config().input {
            return Err(corrupt(format!("buffer entries have width {}", e.x.len())));
        }
    }
    Ok(Engine {
        config: manifest.config,
        extractor,
        detector,
        buffer,
        rng: RngState::restore(&manifest.rng),
    })
}

pub fn save(engine: &Engine, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(engine)?)?;
    Ok(())
}

pub fn load(path: &Path, expected: Option<&PipelineConfig>) -> Result<Engine> {
    from_bytes(&std::fs::read(path)?, expected)
}
