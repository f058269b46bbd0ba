//! MLP flow classifier and ACC/F1 metrics.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::DetectorInput;
use crate::ingest::Label;
use crate::nn::{softmax, AdamConfig, Graph, Linear, NdArray, ParamStore, RngState, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub input: usize,
    pub hidden: Vec<usize>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input: 34,
            hidden: vec![64, 32],
        }
    }
}

pub const CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DetectorModel {
    cfg: DetectorConfig,
    store: ParamStore,
    layers: Vec<Linear>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: [f64; 2],
    pub probabilities: [f64; 2],
    pub label: Label,
}

impl Prediction {
    pub fn from_logits(logits: [f64; 2]) -> Self {
        let p = softmax(&logits);
        Prediction {
            logits,
            probabilities: [p[0], p[1]],
            // ties go to benign
            label: if logits[1] > logits[0] {
                Label::Malicious
            } else {
                Label::Benign
            },
        }
    }
}

impl DetectorModel {
    pub fn new(cfg: DetectorConfig, rng: &mut RngState) -> Result<Self> {
        if cfg.input == 0 || cfg.hidden.contains(&0) {
            return Err(Error::Config(format!("degenerate detector config {cfg:?}")));
        }
        let mut store = ParamStore::new();
        let mut widths = vec![cfg.input];
        widths.extend(&cfg.hidden);
        widths.push(CLASSES);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut store, &format!("det.l{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(DetectorModel { cfg, store, layers })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn input_matrix(&self, xs: &[&DetectorInput]) -> Result<NdArray> {
        if xs.is_empty() {
            return Err(Error::Empty("detector batch"));
        }
        if let Some(bad) = xs.iter().find(|x| x.len() != self.cfg.input) {
            return Err(Error::shape(
                "detector",
                format!("input width {} for model width {}", bad.len(), self.cfg.input),
            ));
        }
        let data = xs.iter().flat_map(|x| x.as_slice().iter().copied()).collect();
        NdArray::matrix(xs.len(), self.cfg.input, data)
    }

    /// Records the MLP on `g`, reading parameters from `store`.
    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, x: &NdArray) -> Result<Var> {
        let mut h = g.constant(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// `[batch, 2]` logits.
    pub fn logits(&self, xs: &[&DetectorInput]) -> Result<NdArray> {
        let x = self.input_matrix(xs)?;
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, &self.store, &x)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, x: &DetectorInput) -> Result<Prediction> {
        Ok(self.predict_batch(&[x])?.remove(0))
    }

    pub fn predict_batch(&self, xs: &[&DetectorInput]) -> Result<Vec<Prediction>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let l = self.logits(xs)?;
        Ok((0..xs.len())
            .map(|i| Prediction::from_logits([l.at(i, 0), l.at(i, 1)]))
            .collect())
    }

    /// Supervised cross-entropy training from the current parameters;
    /// returns the mean loss of each epoch.
    pub fn pretrain(
        &mut self,
        data: &[(DetectorInput, Label)],
        train: &TrainConfig,
        rng: &mut RngState,
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::Empty("detector training set"));
        }
        let first = data[0].1;
        if data.iter().all(|(_, y)| *y == first) {
            return Err(Error::SingleClass);
        }
        let adam = AdamConfig::with_lr(train.lr);
        self.store.reset_optimizer();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut log = Vec::with_capacity(train.epochs);
        for epoch in 0..train.epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            for chunk in order.chunks(train.batch_size.max(1)) {
                let xs: Vec<&DetectorInput> = chunk.iter().map(|i| &data[*i].0).collect();
                let ys: Vec<usize> = chunk.iter().map(|i| data[*i].1.index()).collect();
                let x = self.input_matrix(&xs)?;
                let mut g = Graph::new();
                let logits = self.forward_graph(&mut g, &self.store, &x)?;
                let loss = g.cross_entropy(logits, &ys, &vec![1.0; ys.len()])?;
                let v = g.scalar(loss);
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("detector pretrain epoch {epoch}"),
                    });
                }
                g.backward(loss, &mut self.store)?;
                self.store.adam_step(&adam)?;
                total += v * chunk.len() as f64;
            }
            log.push(total / data.len() as f64);
        }
        Ok(log)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion counts with malicious as the positive class. Zero
/// denominators yield zero.
pub fn compute_metrics(predicted: &[Label], truth: &[Label]) -> Result<MetricsReport> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(
            "compute_metrics",
            format!("{} predictions for {} labels", predicted.len(), truth.len()),
        ));
    }
    if predicted.is_empty() {
        return Err(Error::Empty("metrics input"));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (p, t) in predicted.iter().zip(truth) {
        match (p, t) {
            (Label::Malicious, Label::Malicious) => tp += 1,
            (Label::Malicious, Label::Benign) => fp += 1,
            (Label::Benign, Label::Benign) => tn += 1,
            (Label::Benign, Label::Malicious) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricsReport {
        tp,
        fp,
        tn,
        fn_,
        accuracy: ratio(tp + tn, predicted.len()),
        precision,
        recall,
        f1,
    })
}
