use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{DetectorConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::extractor::{AeTrainConfig, ExtractorConfig};
use crate::ingest::{HEAD_PACKETS, LENGTH_BUCKETS};
use crate::learner::{LearnConfig, LearnMode, OfferPolicy};

/// Every tunable of the tool. The text form is one `key = value` per line;
/// `#` starts a comment and omitted keys keep their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seq_len: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub lr: f64,
    pub ae_lr: f64,
    pub batch_size: usize,
    pub ae_epochs: usize,
    pub pretrain_epochs: usize,
    pub update_epochs: usize,
    pub buffer_capacity: usize,
    pub buffer_batch: usize,
    pub offer: OfferPolicy,
    pub seed: u64,
    pub mode: LearnMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seq_len: HEAD_PACKETS,
            embed_dim: 32,
            hidden: 8,
            layers: 2,
            alpha: 0.5,
            gamma: 10.0,
            lr: 1e-3,
            ae_lr: 5e-3,
            batch_size: 64,
            ae_epochs: 8,
            pretrain_epochs: 30,
            update_epochs: 30,
            buffer_capacity: 500,
            buffer_batch: 64,
            offer: OfferPolicy::Final,
            seed: 0,
            mode: LearnMode::FullLoss,
        }
    }
}

const KEYS: [&str; 17] = [
    "seq_len",
    "embed_dim",
    "hidden",
    "layers",
    "alpha",
    "gamma",
    "lr",
    "ae_lr",
    "batch_size",
    "ae_epochs",
    "pretrain_epochs",
    "update_epochs",
    "buffer_capacity",
    "buffer_batch",
    "offer",
    "seed",
    "mode",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: bad value `{value}` for `{key}`")))
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {n}: expected `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {n}: duplicate key `{key}`")));
            }
            match key {
                "seq_len" => cfg.seq_len = parse_value(key, value, n)?,
                "embed_dim" => cfg.embed_dim = parse_value(key, value, n)?,
                "hidden" => cfg.hidden = parse_value(key, value, n)?,
                "layers" => cfg.layers = parse_value(key, value, n)?,
                "alpha" => cfg.alpha = parse_value(key, value, n)?,
                "gamma" => cfg.gamma = parse_value(key, value, n)?,
                "lr" => cfg.lr = parse_value(key, value, n)?,
                "ae_lr" => cfg.ae_lr = parse_value(key, value, n)?,
                "batch_size" => cfg.batch_size = parse_value(key, value, n)?,
                "ae_epochs" => cfg.ae_epochs = parse_value(key, value, n)?,
                "pretrain_epochs" => cfg.pretrain_epochs = parse_value(key, value, n)?,
                "update_epochs" => cfg.update_epochs = parse_value(key, value, n)?,
                "buffer_capacity" => cfg.buffer_capacity = parse_value(key, value, n)?,
                "buffer_batch" => cfg.buffer_batch = parse_value(key, value, n)?,
                "offer" => cfg.offer = value.parse().map_err(|e| Error::Config(format!("line {n}: {e}")))?,
                "seed" => cfg.seed = parse_value(key, value, n)?,
                "mode" => cfg.mode = value.parse().map_err(|e| Error::Config(format!("line {n}: {e}")))?,
                other => {
                    return Err(Error::Config(format!(
                        "line {n}: unknown key `{other}` (known: {})",
                        KEYS.join(", ")
                    )))
                }
            }
            seen.push(key);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seq_len = {}", self.seq_len);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "ae_lr = {}", self.ae_lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "ae_epochs = {}", self.ae_epochs);
        let _ = writeln!(s, "pretrain_epochs = {}", self.pretrain_epochs);
        let _ = writeln!(s, "update_epochs = {}", self.update_epochs);
        let _ = writeln!(s, "buffer_capacity = {}", self.buffer_capacity);
        let _ = writeln!(s, "buffer_batch = {}", self.buffer_batch);
        let _ = writeln!(s, "offer = {}", self.offer.as_str());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "mode = {}", self.mode);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len != HEAD_PACKETS {
            return Err(Error::Config(format!(
                "seq_len must be {HEAD_PACKETS}; flow records carry that many head packets"
            )));
        }
        self.extractor_config().validate()?;
        self.learn_config().validate()?;
        if !(self.ae_lr > 0.0 && self.ae_lr.is_finite()) {
            return Err(Error::Config(format!("ae_lr must be > 0, got {}", self.ae_lr)));
        }
        Ok(())
    }

    pub fn extractor_config(&self) -> ExtractorConfig {
        ExtractorConfig {
            seq_len: self.seq_len,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            layers: self.layers,
            buckets: LENGTH_BUCKETS,
            head_hidden: ExtractorConfig::default().head_hidden,
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            input: self.embed_dim + 2,
            ..DetectorConfig::default()
        }
    }

    pub fn ae_train(&self) -> AeTrainConfig {
        AeTrainConfig {
            epochs: self.ae_epochs,
            batch_size: self.batch_size,
            lr: self.ae_lr,
        }
    }

    pub fn detector_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }

    pub fn learn_config(&self) -> LearnConfig {
        LearnConfig {
            alpha: self.alpha,
            gamma: self.gamma,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs_per_round: self.update_epochs,
            buffer_batch: self.buffer_batch,
            offer: self.offer,
            mode: self.mode,
        }
    }

    /// Fields that fix parameter shapes.
    pub fn same_architecture(&self, other: &PipelineConfig) -> bool {
        (self.seq_len, self.embed_dim, self.hidden, self.layers)
            == (other.seq_len, other.embed_dim, other.hidden, other.layers)
    }
}
