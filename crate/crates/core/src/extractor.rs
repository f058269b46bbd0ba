//! Bidirectional-GRU sequence autoencoder over length-bucket sequences.
//!
//! The encoder's concatenated final states are the flow embedding. The
//! decoder sees that embedding at every step and a per-step perceptron
//! scores the original bucket, so training minimises per-step
//! cross-entropy against the input buckets.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{NormalizedSequence, HEAD_PACKETS, LENGTH_BUCKETS};
use crate::nn::{
    softmax, AdamConfig, BiGruStack, Graph, Linear, NdArray, ParamId, ParamStore, RngState, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub seq_len: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Real buckets; the embedding table has one extra padding row.
    pub buckets: usize,
    pub head_hidden: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            seq_len: HEAD_PACKETS,
            embed_dim: 32,
            hidden: 8,
            layers: 2,
            buckets: LENGTH_BUCKETS,
            head_hidden: 32,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.hidden == 0 || self.layers == 0 || self.buckets < 2 || self.head_hidden == 0 {
            return Err(Error::Config(format!("degenerate extractor config {self:?}")));
        }
        if 2 * self.layers * self.hidden != self.embed_dim {
            return Err(Error::Config(format!(
                "encoder state width 2·{}·{} must equal embedding size {}",
                self.layers, self.hidden, self.embed_dim
            )));
        }
        Ok(())
    }

    pub fn pad_bucket(&self) -> usize {
        self.buckets
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

/// Embedding followed by `d_norm` and `t_m_norm`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorInput(pub Vec<f64>);

impl DetectorInput {
    pub fn from_parts(feature: &FeatureVector, d_norm: f64, t_m_norm: f64) -> Self {
        let mut v = feature.0.clone();
        v.push(d_norm);
        v.push(t_m_norm);
        DetectorInput(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            epochs: 8,
            batch_size: 64,
            lr: 5e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AutoEncoderModel {
    cfg: ExtractorConfig,
    store: ParamStore,
    embedding: ParamId,
    encoder: BiGruStack,
    decoder: BiGruStack,
    head_hidden: Linear,
    head_out: Linear,
}

const ENCODE_CHUNK: usize = 256;

impl AutoEncoderModel {
    pub fn new(cfg: ExtractorConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let vocab = cfg.buckets + 1;
        let embedding = store.add_glorot("ae.embedding", &[vocab, cfg.embed_dim], vocab, cfg.embed_dim, rng)?;
        let encoder = BiGruStack::new(&mut store, "ae.enc", cfg.embed_dim, cfg.hidden, cfg.layers, rng)?;
        let decoder = BiGruStack::new(&mut store, "ae.dec", cfg.embed_dim, cfg.hidden, cfg.layers, rng)?;
        let head_hidden = Linear::new(&mut store, "ae.head0", 2 * cfg.hidden, cfg.head_hidden, rng)?;
        let head_out = Linear::new(&mut store, "ae.head1", cfg.head_hidden, cfg.buckets, rng)?;
        if encoder.state_width() != cfg.embed_dim {
            return Err(Error::Config("encoder width differs from embedding size".into()));
        }
        Ok(AutoEncoderModel {
            cfg,
            store,
            embedding,
            encoder,
            decoder,
            head_hidden,
            head_out,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check(&self, seq: &NormalizedSequence) -> Result<()> {
        if seq.buckets.len() != self.cfg.seq_len || seq.mask.len() != self.cfg.seq_len {
            return Err(Error::shape(
                "autoencoder",
                format!("sequence length {} for model length {}", seq.buckets.len(), self.cfg.seq_len),
            ));
        }
        if let Some(b) = seq.buckets.iter().find(|b| **b > self.cfg.pad_bucket()) {
            return Err(Error::Invalid(format!("bucket {b} out of range")));
        }
        Ok(())
    }

    fn masks(&self, seqs: &[&NormalizedSequence]) -> Vec<Vec<bool>> {
        (0..self.cfg.seq_len)
            .map(|t| seqs.iter().map(|s| s.mask[t]).collect())
            .collect()
    }

    /// Records the encoder on `g`; returns `[batch, embed_dim]` features.
    pub fn encode_graph(&self, g: &mut Graph, store: &ParamStore, seqs: &[&NormalizedSequence]) -> Result<Var> {
        for s in seqs {
            self.check(s)?;
        }
        let table = g.param(store, self.embedding);
        let inputs = (0..self.cfg.seq_len)
            .map(|t| {
                let rows: Vec<usize> = seqs.iter().map(|s| s.buckets[t]).collect();
                g.gather(table, &rows)
            })
            .collect::<Result<Vec<_>>>()?;
        let out = self.encoder.forward(g, store, &inputs, &self.masks(seqs))?;
        Ok(out.final_state)
    }

    /// Records encoder, decoder and head; returns time-major scores
    /// `[seq_len · batch, buckets]` (row `t·batch + i` is step `t` of item `i`).
    pub fn reconstruct_graph(&self, g: &mut Graph, store: &ParamStore, seqs: &[&NormalizedSequence]) -> Result<Var> {
        let feature = self.encode_graph(g, store, seqs)?;
        let inputs = vec![feature; self.cfg.seq_len];
        let dec = self.decoder.forward(g, store, &inputs, &self.masks(seqs))?;
        let stacked = g.stack_rows(&dec.outputs)?;
        let hidden = self.head_hidden.forward(g, store, stacked)?;
        let hidden = g.relu(hidden);
        self.head_out.forward(g, store, hidden)
    }

    /// Mean per-step cross-entropy over valid steps of the batch.
    pub fn loss_graph(&self, g: &mut Graph, store: &ParamStore, seqs: &[&NormalizedSequence]) -> Result<Var> {
        let scores = self.reconstruct_graph(g, store, seqs)?;
        let (labels, weights) = self.targets(seqs);
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::Empty("valid reconstruction steps"));
        }
        g.cross_entropy(scores, &labels, &weights)
    }

    fn targets(&self, seqs: &[&NormalizedSequence]) -> (Vec<usize>, Vec<f64>) {
        let mut labels = Vec::with_capacity(self.cfg.seq_len * seqs.len());
        let mut weights = Vec::with_capacity(labels.capacity());
        for t in 0..self.cfg.seq_len {
            for s in seqs {
                if s.mask[t] {
                    labels.push(s.buckets[t]);
                    weights.push(1.0);
                } else {
                    labels.push(0);
                    weights.push(0.0);
                }
            }
        }
        (labels, weights)
    }

    pub fn encode(&self, seq: &NormalizedSequence) -> Result<FeatureVector> {
        Ok(self.encode_batch(&[seq])?.remove(0))
    }

    pub fn encode_batch(&self, seqs: &[&NormalizedSequence]) -> Result<Vec<FeatureVector>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(ENCODE_CHUNK) {
            let mut g = Graph::new();
            let f = self.encode_graph(&mut g, &self.store, chunk)?;
            let v = g.value(f);
            out.extend((0..chunk.len()).map(|i| FeatureVector(v.row(i).to_vec())));
        }
        Ok(out)
    }

    /// Per-step bucket scores, `[seq_len, buckets]`.
    pub fn reconstruct(&self, seq: &NormalizedSequence) -> Result<NdArray> {
        let mut g = Graph::new();
        let scores = self.reconstruct_graph(&mut g, &self.store, &[seq])?;
        Ok(g.value(scores).clone())
    }

    /// One pass over `data` in shuffled minibatches; returns the mean loss
    /// over all valid steps.
    pub fn train_epoch(
        &mut self,
        data: &[NormalizedSequence],
        train: &AeTrainConfig,
        rng: &mut RngState,
    ) -> Result<f64> {
        let adam = AdamConfig::with_lr(train.lr);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let mut weighted = 0.0;
        let mut steps = 0usize;
        for (b, chunk) in order.chunks(train.batch_size.max(1)).enumerate() {
            let batch: Vec<&NormalizedSequence> = chunk.iter().map(|i| &data[*i]).collect();
            let valid: usize = batch.iter().map(|s| s.valid_len()).sum();
            let mut g = Graph::new();
            let loss = self.loss_graph(&mut g, &self.store, &batch)?;
            let v = g.scalar(loss);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("autoencoder batch {b}"),
                });
            }
            g.backward(loss, &mut self.store)?;
            self.store.adam_step(&adam)?;
            weighted += v * valid as f64;
            steps += valid;
        }
        Ok(weighted / steps as f64)
    }

    pub fn fit(
        &mut self,
        data: &[NormalizedSequence],
        train: &AeTrainConfig,
        rng: &mut RngState,
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::Empty("autoencoder training set"));
        }
        if data.iter().any(|s| s.valid_len() == 0) {
            return Err(Error::Empty("sequence with no valid steps"));
        }
        self.store.reset_optimizer();
        (0..train.epochs)
            .map(|_| self.train_epoch(data, train, rng))
            .collect()
    }
}

/// Mean cross-entropy between per-step scores `[steps, buckets]` and the
/// sequence's buckets, over valid steps only.
pub fn reconstruction_loss(scores: &NdArray, seq: &NormalizedSequence) -> Result<f64> {
    if scores.shape().len() != 2 || scores.rows() != seq.buckets.len() || seq.mask.len() != seq.buckets.len() {
        return Err(Error::shape(
            "reconstruction_loss",
            format!("scores {:?} for {} steps", scores.shape(), seq.buckets.len()),
        ));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (t, (&b, &m)) in seq.buckets.iter().zip(&seq.mask).enumerate() {
        if !m {
            continue;
        }
        if b >= scores.cols() {
            return Err(Error::Invalid(format!("bucket {b} at valid step {t}")));
        }
        total -= softmax(scores.row(t))[b].ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("valid reconstruction steps"));
    }
    Ok(total / n as f64)
}

/// Builds a fresh model and trains it on `data`.
pub fn train_autoencoder(
    cfg: ExtractorConfig,
    data: &[NormalizedSequence],
    train: &AeTrainConfig,
    rng: &mut RngState,
) -> Result<(AutoEncoderModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Empty("autoencoder training set"));
    }
    let mut model = AutoEncoderModel::new(cfg, rng)?;
    let curve = model.fit(data, train, rng)?;
    Ok((model, curve))
}

/// Embedding plus the two timing scalars, in input order.
pub fn extract_features(model: &AutoEncoderModel, seqs: &[&NormalizedSequence]) -> Result<Vec<DetectorInput>> {
    let feats = model.encode_batch(seqs)?;
    Ok(feats
        .iter()
        .zip(seqs)
        .map(|(f, s)| DetectorInput::from_parts(f, s.d_norm, s.t_m_norm))
        .collect())
}
