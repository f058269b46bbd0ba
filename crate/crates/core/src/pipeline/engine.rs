use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::records::FlowRecord;
use crate::buffer::{BufferEntry, ReplayBuffer};
use crate::detector::{compute_metrics, DetectorModel, MetricsReport, Prediction};
use crate::error::{Error, Result};
use crate::extractor::{extract_features, AutoEncoderModel, DetectorInput};
use crate::ingest::{Label, NormalizedSequence};
use crate::learner::{incremental_round, LearnMode, LossLogRow};
use crate::nn::RngState;

/// Everything a run carries between commands: both models, the replay
/// buffer, the generator position and the config that built them.
#[derive(Clone, Debug)]
pub struct Engine {
    pub config: PipelineConfig,
    pub extractor: AutoEncoderModel,
    pub detector: DetectorModel,
    pub buffer: ReplayBuffer,
    pub rng: RngState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub ae_curve: Vec<f64>,
    pub detector_curve: Vec<f64>,
    pub train_metrics: MetricsReport,
}

fn sequences(flows: &[&FlowRecord]) -> Vec<NormalizedSequence> {
    flows.iter().map(|f| f.sequence()).collect()
}

impl Engine {
    /// Trains the autoencoder on all `flows`, then the detector on their
    /// labels, then streams the flows through the buffer in file order with
    /// the trained detector's logits.
    pub fn pretrain(config: PipelineConfig, flows: &[&FlowRecord]) -> Result<(Engine, PretrainReport)> {
        config.validate()?;
        if flows.is_empty() {
            return Err(Error::Empty("pretraining flows"));
        }
        let labels: Vec<Label> = flows.iter().map(|f| f.labeled()).collect::<Result<_>>()?;
        if labels.iter().all(|l| *l == labels[0]) {
            return Err(Error::SingleClass);
        }
        let mut rng = RngState::seeded(config.seed);
        let seqs = sequences(flows);
        let mut extractor = AutoEncoderModel::new(config.extractor_config(), &mut rng)?;
        let ae_curve = extractor.fit(&seqs, &config.ae_train(), &mut rng)?;
        let seq_refs: Vec<&NormalizedSequence> = seqs.iter().collect();
        let inputs = extract_features(&extractor, &seq_refs)?;
        let data: Vec<(DetectorInput, Label)> = inputs.into_iter().zip(labels.iter().copied()).collect();

        let mut detector = DetectorModel::new(config.detector_config(), &mut rng)?;
        let detector_curve = detector.pretrain(&data, &config.detector_train(), &mut rng)?;

        let xs: Vec<&DetectorInput> = data.iter().map(|(x, _)| x).collect();
        let predictions = detector.predict_batch(&xs)?;
        let predicted: Vec<Label> = predictions.iter().map(|p| p.label).collect();
        let train_metrics = compute_metrics(&predicted, &labels)?;

        let mut buffer = ReplayBuffer::new(config.buffer_capacity);
        for ((x, y), p) in data.into_iter().zip(&predictions) {
            buffer.offer(BufferEntry { x, y, z: p.logits }, &mut rng);
        }
        let engine = Engine {
            config,
            extractor,
            detector,
            buffer,
            rng,
        };
        Ok((
            engine,
            PretrainReport {
                ae_curve,
                detector_curve,
                train_metrics,
            },
        ))
    }

    pub fn features(&self, flows: &[&FlowRecord]) -> Result<Vec<DetectorInput>> {
        if flows.is_empty() {
            return Ok(Vec::new());
        }
        let seqs = sequences(flows);
        let refs: Vec<&NormalizedSequence> = seqs.iter().collect();
        extract_features(&self.extractor, &refs)
    }

    pub fn labeled_inputs(&self, flows: &[&FlowRecord]) -> Result<Vec<(DetectorInput, Label)>> {
        let labels: Vec<Label> = flows.iter().map(|f| f.labeled()).collect::<Result<_>>()?;
        Ok(self.features(flows)?.into_iter().zip(labels).collect())
    }

    /// One incremental round on already extracted inputs.
    pub fn update_inputs(&mut self, data: &[(DetectorInput, Label)], mode: LearnMode) -> Result<Vec<LossLogRow>> {
        let cfg = crate::learner::LearnConfig {
            mode,
            ..self.config.learn_config()
        };
        incremental_round(&mut self.detector, &mut self.buffer, data, &cfg, &mut self.rng)
    }

    /// One incremental round in the configured mode; the extractor stays
    /// frozen.
    pub fn update(&mut self, flows: &[&FlowRecord]) -> Result<Vec<LossLogRow>> {
        if flows.is_empty() {
            return Err(Error::Empty("update flows"));
        }
        let data = self.labeled_inputs(flows)?;
        self.update_inputs(&data, self.config.mode)
    }

    pub fn detect(&self, flows: &[&FlowRecord]) -> Result<Vec<Prediction>> {
        if flows.is_empty() {
            return Ok(Vec::new());
        }
        let inputs = self.features(flows)?;
        let refs: Vec<&DetectorInput> = inputs.iter().collect();
        self.detector.predict_batch(&refs)
    }

    /// Swaps in training settings from `config` (learning rates, epochs,
    /// mode, ...). Shape-defining fields must match the models.
    pub fn apply_runtime_config(&mut self, config: &PipelineConfig) -> Result<()> {
        config.validate()?;
        if !self.config.same_architecture(config) {
            return Err(Error::Config(format!(
                "architecture differs from the checkpoint (stored n={} V={} H={} B={}, given n={} V={} H={} B={})",
                self.config.seq_len,
                self.config.embed_dim,
                self.config.hidden,
                self.config.layers,
                config.seq_len,
                config.embed_dim,
                config.hidden,
                config.layers
            )));
        }
        if config.buffer_capacity != self.buffer.capacity() {
            return Err(Error::Config(format!(
                "buffer capacity {} differs from the checkpoint's {}",
                config.buffer_capacity,
                self.buffer.capacity()
            )));
        }
        self.config = config.clone();
        Ok(())
    }
}
