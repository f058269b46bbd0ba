//! Replay-based incremental updates with logit distillation.
//!
//! One optimisation step on a minibatch of new samples minimises
//!
//! ```text
//! total = CE(new) + α·mean‖z' − g(x')‖² + k·α·CE(buffer'')
//! k     = 0.5 + σ(γ · α·mean‖z' − g(x')‖²)
//! ```
//!
//! where `(x', z')` and `(x'', y'')` are two independent draws from the
//! replay buffer, `z'` are the logits recorded when `x'` entered the buffer
//! and `g` is the current detector. `k` is evaluated from the current
//! distillation value and held constant for differentiation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::buffer::{BufferEntry, ReplayBuffer};
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::extractor::DetectorInput;
use crate::ingest::Label;
use crate::nn::{AdamConfig, Graph, NdArray, ParamStore, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LearnMode {
    /// Cross-entropy plus distillation and replayed cross-entropy.
    #[serde(rename = "etguard")]
    FullLoss,
    /// Plain fine-tuning on the new data.
    #[serde(rename = "etguard-v")]
    FinetuneOnly,
    /// Cross-entropy over everything seen so far (caller passes the union).
    #[serde(rename = "full")]
    Joint,
}

impl LearnMode {
    pub const ALL: [LearnMode; 3] = [LearnMode::FullLoss, LearnMode::FinetuneOnly, LearnMode::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            LearnMode::FullLoss => "etguard",
            LearnMode::FinetuneOnly => "etguard-v",
            LearnMode::Joint => "full",
        }
    }
}

impl fmt::Display for LearnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LearnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "etguard" => Ok(LearnMode::FullLoss),
            "etguard-v" => Ok(LearnMode::FinetuneOnly),
            "full" => Ok(LearnMode::Joint),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected etguard, etguard-v or full)"
            ))),
        }
    }
}

/// When new samples enter the replay buffer during a round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OfferPolicy {
    /// Once per sample, after its minibatch step in the last epoch.
    Final,
    /// After every step of every epoch, so each sample is offered once per
    /// epoch.
    Every,
}

impl OfferPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            OfferPolicy::Final => "final",
            OfferPolicy::Every => "every",
        }
    }
}

impl FromStr for OfferPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(OfferPolicy::Final),
            "every" => Ok(OfferPolicy::Every),
            other => Err(Error::Config(format!("unknown offer policy `{other}` (expected final or every)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_per_round: usize,
    /// Entries per replay draw.
    pub buffer_batch: usize,
    pub offer: OfferPolicy,
    pub mode: LearnMode,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            alpha: 0.5,
            gamma: 10.0,
            lr: 1e-3,
            batch_size: 64,
            epochs_per_round: 30,
            buffer_batch: 64,
            offer: OfferPolicy::Final,
            mode: LearnMode::FullLoss,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::Config("lr and batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    /// Distillation term, α already applied.
    pub l_il: f64,
    /// Replayed cross-entropy, α already applied (multiplied by `k` in the total).
    pub l_lb: f64,
    pub k: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossLogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

impl LossLogRow {
    pub const CSV_HEADER: &'static str = "epoch,step,l_ce,l_il,l_lb,k,total";

    pub fn to_csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.step, l.l_ce, l.l_il, l.l_lb, l.k, l.total
        )
    }
}

pub fn loss_log_csv(rows: &[LossLogRow]) -> String {
    let mut out = String::from(LossLogRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// `Σ pᵢ ln(pᵢ/qᵢ)` for strictly positive probability vectors.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::shape("kl_divergence", format!("{} vs {}", p.len(), q.len())));
    }
    for v in [p, q] {
        if v.iter().any(|x| *x <= 0.0 || !x.is_finite()) {
            return Err(Error::Invalid("kl_divergence needs strictly positive entries".into()));
        }
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("probabilities sum to {s}")));
        }
    }
    Ok(p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum())
}

/// KL divergence against a perturbed distribution next to its local
/// quadratic (Fisher-weighted Euclidean) approximation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlQuadratic {
    pub kl: f64,
    /// `(ε²/2)·Σ Δᵢ²/pᵢ`
    pub weighted_euclid: f64,
    pub residual: f64,
}

/// Compares `KL(p ‖ p + εΔ)` with `(ε²/2)·Σ Δᵢ²/pᵢ`. `Δ` must sum to zero
/// so that `p + εΔ` stays on the simplex.
pub fn kl_local_quadratic(p: &[f64], delta: &[f64], eps: f64) -> Result<KlQuadratic> {
    if p.len() != delta.len() {
        return Err(Error::shape("kl_local_quadratic", "p and delta lengths differ"));
    }
    let drift: f64 = delta.iter().sum();
    if drift.abs() > 1e-9 {
        return Err(Error::Invalid(format!("perturbation sums to {drift}, not 0")));
    }
    let q: Vec<f64> = p.iter().zip(delta).map(|(a, d)| a + eps * d).collect();
    if q.iter().any(|v| *v <= 0.0) {
        return Err(Error::Invalid("perturbation leaves the simplex".into()));
    }
    let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
    let weighted_euclid = 0.5 * eps * eps * p.iter().zip(delta).map(|(a, d)| d * d / a).sum::<f64>();
    Ok(KlQuadratic {
        kl,
        weighted_euclid,
        residual: kl - weighted_euclid,
    })
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `0.5 + σ(γ·l_il)`, in `[1, 1.5)` for `l_il ≥ 0`.
pub fn balance_coefficient(l_il: f64, gamma: f64) -> f64 {
    0.5 + logistic(gamma * l_il)
}

/// Assembles the breakdown from already computed parts. `l_il` carries
/// α; `buffer_ce_mean` does not.
pub fn compose_total(l_ce: f64, l_il: f64, buffer_ce_mean: f64, alpha: f64, gamma: f64) -> LossBreakdown {
    let k = balance_coefficient(l_il, gamma);
    let l_lb = alpha * buffer_ce_mean;
    LossBreakdown {
        l_ce,
        l_il,
        l_lb,
        k,
        total: l_ce + l_il + k * l_lb,
    }
}

fn entry_inputs(detector: &DetectorModel, batch: &[&BufferEntry]) -> Result<NdArray> {
    let xs: Vec<&DetectorInput> = batch.iter().map(|e| &e.x).collect();
    detector.input_matrix(&xs)
}

fn entry_logits(batch: &[&BufferEntry]) -> Result<NdArray> {
    NdArray::matrix(batch.len(), 2, batch.iter().flat_map(|e| e.z).collect())
}

/// `α · mean ‖z' − g(x')‖²` under the detector's current parameters.
pub fn distillation_loss(detector: &DetectorModel, batch: &[&BufferEntry], alpha: f64) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let x = entry_inputs(detector, batch)?;
    let out = detector.forward_graph(&mut g, detector.params(), &x)?;
    let l = g.sq_dist(out, &entry_logits(batch)?, alpha)?;
    Ok(g.scalar(l))
}

/// Mean cross-entropy of the current detector on replayed `(x'', y'')`.
pub fn buffer_ce_loss(detector: &DetectorModel, batch: &[&BufferEntry]) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let x = entry_inputs(detector, batch)?;
    let out = detector.forward_graph(&mut g, detector.params(), &x)?;
    let ys: Vec<usize> = batch.iter().map(|e| e.y.index()).collect();
    let l = g.cross_entropy(out, &ys, &vec![1.0; ys.len()])?;
    Ok(g.scalar(l))
}

/// A minibatch of new labelled samples as a model-ready matrix.
pub struct Minibatch {
    pub x: NdArray,
    pub y: Vec<usize>,
}

impl Minibatch {
    pub fn new(detector: &DetectorModel, samples: &[&(DetectorInput, Label)]) -> Result<Self> {
        let xs: Vec<&DetectorInput> = samples.iter().map(|(x, _)| x).collect();
        Ok(Minibatch {
            x: detector.input_matrix(&xs)?,
            y: samples.iter().map(|(_, y)| y.index()).collect(),
        })
    }
}

/// Records the composite loss on `g` against parameters in `store`.
/// `k_override` pins the balance coefficient (finite-difference checks
/// need it fixed across perturbations).
#[allow(clippy::too_many_arguments)]
pub fn total_loss_graph(
    g: &mut Graph,
    store: &ParamStore,
    detector: &DetectorModel,
    current: &Minibatch,
    replay_distill: &[&BufferEntry],
    replay_ce: &[&BufferEntry],
    cfg: &LearnConfig,
    k_override: Option<f64>,
) -> Result<(crate::nn::Var, LossBreakdown)> {
    let logits = detector.forward_graph(g, store, &current.x)?;
    let l_ce = g.cross_entropy(logits, &current.y, &vec![1.0; current.y.len()])?;
    let l_ce_v = g.scalar(l_ce);
    let mut terms = vec![(l_ce, 1.0)];
    let mut breakdown = LossBreakdown {
        l_ce: l_ce_v,
        l_il: 0.0,
        l_lb: 0.0,
        k: k_override.unwrap_or(balance_coefficient(0.0, cfg.gamma)),
        total: l_ce_v,
    };
    if cfg.mode == LearnMode::FullLoss {
        if !replay_distill.is_empty() {
            let x = entry_inputs(detector, replay_distill)?;
            let out = detector.forward_graph(g, store, &x)?;
            let l_il = g.sq_dist(out, &entry_logits(replay_distill)?, cfg.alpha)?;
            breakdown.l_il = g.scalar(l_il);
            breakdown.k = k_override.unwrap_or(balance_coefficient(breakdown.l_il, cfg.gamma));
            terms.push((l_il, 1.0));
        }
        if !replay_ce.is_empty() {
            let x = entry_inputs(detector, replay_ce)?;
            let out = detector.forward_graph(g, store, &x)?;
            let ys: Vec<usize> = replay_ce.iter().map(|e| e.y.index()).collect();
            let ce = g.cross_entropy(out, &ys, &vec![1.0; ys.len()])?;
            breakdown.l_lb = cfg.alpha * g.scalar(ce);
            terms.push((ce, breakdown.k * cfg.alpha));
        }
    }
    let total = g.lin_comb(&terms);
    breakdown.total = g.scalar(total);
    Ok((total, breakdown))
}

/// One incremental round on `new_data`.
///
/// Each epoch shuffles the new samples; per minibatch the composite loss is
/// evaluated with two fresh replay draws and one Adam step is taken. The
/// minibatch's samples are then offered to the buffer with their post-step
/// logits, in the last epoch only or in every epoch depending on
/// `cfg.offer`. Optimizer moments start fresh each round.
pub fn incremental_round(
    detector: &mut DetectorModel,
    buffer: &mut ReplayBuffer,
    new_data: &[(DetectorInput, Label)],
    cfg: &LearnConfig,
    rng: &mut RngState,
) -> Result<Vec<LossLogRow>> {
    cfg.validate()?;
    if new_data.is_empty() {
        return Err(Error::Empty("incremental round data"));
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    detector.params_mut().reset_optimizer();
    let mut order: Vec<usize> = (0..new_data.len()).collect();
    let mut log = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs_per_round {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&(DetectorInput, Label)> = chunk.iter().map(|i| &new_data[*i]).collect();
            let batch = Minibatch::new(detector, &samples)?;
            let (distill, replay) = if cfg.mode == LearnMode::FullLoss {
                buffer.sample_two_batches(cfg.buffer_batch, rng)
            } else {
                (Vec::new(), Vec::new())
            };
            let mut g = Graph::new();
            let (total, breakdown) =
                total_loss_graph(&mut g, detector.params(), detector, &batch, &distill, &replay, cfg, None)?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("incremental round epoch {epoch} step {step}"),
                });
            }
            drop((distill, replay));
            g.backward(total, detector.params_mut())?;
            detector.params_mut().adam_step(&adam)?;

            if cfg.offer == OfferPolicy::Every || epoch + 1 == cfg.epochs_per_round {
                let xs: Vec<&DetectorInput> = samples.iter().map(|(x, _)| x).collect();
                let post = detector.logits(&xs)?;
                for (i, (x, y)) in samples.iter().enumerate() {
                    buffer.offer(
                        BufferEntry {
                            x: x.clone(),
                            y: *y,
                            z: [post.at(i, 0), post.at(i, 1)],
                        },
                        rng,
                    );
                }
            }
            log.push(LossLogRow {
                epoch,
                step,
                loss: breakdown,
            });
            step += 1;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn small_detector(seed: u64) -> DetectorModel {
        let mut rng = RngState::seeded(seed);
        DetectorModel::new(DetectorConfig { input: 3, hidden: vec![4] }, &mut rng).unwrap()
    }

    fn entry(x: [f64; 3], y: Label, z: [f64; 2]) -> BufferEntry {
        BufferEntry {
            x: DetectorInput(x.to_vec()),
            y,
            z,
        }
    }

    #[test]
    fn kl_cases() {
        let p = [0.5, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let q = [0.51, 0.49];
        let expect = 0.5 * (0.5f64 / 0.51).ln() + 0.5 * (0.5f64 / 0.49).ln();
        let kl = kl_divergence(&p, &q).unwrap();
        assert!(close(kl, expect, 1e-18));
        assert!(close(kl, 0.00020004001, 1e-12));
        let p2 = [0.2, 0.8];
        let q2 = [0.6, 0.4];
        assert!(kl_divergence(&p2, &q2).unwrap() != kl_divergence(&q2, &p2).unwrap());
        assert!(kl_divergence(&[1.0, 0.0], &p).is_err());
        assert!(kl_divergence(&[0.7, 0.7], &p).is_err());
    }

    #[test]
    fn quadratic_approximation_cases() {
        let r = kl_local_quadratic(&[0.5, 0.5], &[1.0, -1.0], 0.0).unwrap();
        assert_eq!((r.kl, r.weighted_euclid, r.residual), (0.0, 0.0, 0.0));
        let r = kl_local_quadratic(&[0.5, 0.5], &[1.0, -1.0], 0.01).unwrap();
        assert!(close(r.weighted_euclid, 2.0e-4, 1e-18));
        let direct = 0.5 * (0.5f64 / 0.51).ln() + 0.5 * (0.5f64 / 0.49).ln();
        assert!(close(r.kl, direct, 1e-18));
        assert!(r.residual.abs() < 1e-6);
        let ratios: Vec<f64> = [1e-1, 1e-2, 1e-3]
            .iter()
            .map(|e| kl_local_quadratic(&[0.5, 0.5], &[0.2, -0.2], *e).unwrap().residual.abs() / (e * e))
            .collect();
        assert!(ratios[0] > ratios[1] && ratios[1] > ratios[2], "{ratios:?}");
        assert!(kl_local_quadratic(&[0.5, 0.5], &[1.0, 1.0], 0.1).is_err());
        assert!(kl_local_quadratic(&[0.5, 0.5], &[1.0, -1.0], 0.6).is_err());
    }

    #[test]
    fn balance_coefficient_cases() {
        assert_eq!(balance_coefficient(0.0, 10.0), 1.0);
        assert!(close(balance_coefficient(1e6, 10.0), 1.5, 1e-15));
        let expect = 0.5 + 1.0 / (1.0 + (-1.0f64).exp());
        assert!(close(balance_coefficient(0.1, 10.0), expect, 1e-15));
        assert!(close(balance_coefficient(0.1, 10.0), 1.23106, 1e-5));
        let mut prev = 1.0;
        for i in 1..200 {
            let k = balance_coefficient(i as f64 * 0.01, 10.0);
            assert!(k >= prev && k > 0.5 && k <= 1.5);
            prev = k;
        }
    }

    #[test]
    fn total_composition_fixture() {
        let b = compose_total(0.7, 1.0, 0.5, 0.5, 10.0);
        let k = 0.5 + 1.0 / (1.0 + (-10.0f64).exp());
        assert!(close(b.k, k, 1e-15));
        assert!(close(b.k, 1.49995, 1e-5));
        assert!(close(b.total, 0.7 + 1.0 + k * 0.25, 1e-15));
        assert!(close(b.total, 2.07499, 1e-5));
    }

    fn zero_bias_identity_detector() -> DetectorModel {
        // 2 -> 2 -> 2 with identity-like weights so logits equal relu(x)
        let mut rng = RngState::seeded(0);
        let mut d = DetectorModel::new(DetectorConfig { input: 2, hidden: vec![2] }, &mut rng).unwrap();
        let s = d.params_mut();
        for name in ["det.l0.w", "det.l1.w"] {
            let id = s.id(name).unwrap();
            s.value_mut(id).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        for name in ["det.l0.b", "det.l1.b"] {
            let id = s.id(name).unwrap();
            s.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        d
    }

    fn e2(x: [f64; 2], y: Label, z: [f64; 2]) -> BufferEntry {
        BufferEntry {
            x: DetectorInput(x.to_vec()),
            y,
            z,
        }
    }

    #[test]
    fn distillation_cases() {
        let d = zero_bias_identity_detector();
        assert_eq!(distillation_loss(&d, &[], 0.5).unwrap(), 0.0);
        // g(x') = x' here
        let same = e2([0.3, 0.9], Label::Benign, [0.3, 0.9]);
        assert_eq!(distillation_loss(&d, &[&same], 0.5).unwrap(), 0.0);
        let one = e2([0.0, 1.0], Label::Benign, [1.0, 0.0]);
        assert!(close(distillation_loss(&d, &[&one], 0.5).unwrap(), 1.0, 1e-15));
        let four = e2([0.0, 0.0], Label::Benign, [2.0, 0.0]);
        assert!(close(distillation_loss(&d, &[&one, &four], 0.5).unwrap(), 1.5, 1e-15));
    }

    #[test]
    fn buffer_ce_cases() {
        let d = zero_bias_identity_detector();
        assert_eq!(buffer_ce_loss(&d, &[]).unwrap(), 0.0);
        let uniform = e2([0.5, 0.5], Label::Malicious, [0.0, 0.0]);
        assert!(close(buffer_ce_loss(&d, &[&uniform]).unwrap(), 2f64.ln(), 1e-15));
        let skew = e2([3f64.ln(), 0.0], Label::Benign, [0.0, 0.0]);
        assert!(close(buffer_ce_loss(&d, &[&skew]).unwrap(), 0.287682, 1e-6));
        let confident = e2([60.0, 0.0], Label::Benign, [0.0, 0.0]);
        assert!(buffer_ce_loss(&d, &[&confident]).unwrap() < 1e-20);
    }

    fn fixture_batch(d: &DetectorModel) -> Minibatch {
        let data = [
            (DetectorInput(vec![0.1, -0.4, 0.8]), Label::Benign),
            (DetectorInput(vec![-0.7, 0.2, 0.3]), Label::Malicious),
            (DetectorInput(vec![0.5, 0.5, -0.9]), Label::Malicious),
        ];
        let refs: Vec<_> = data.iter().collect();
        Minibatch::new(d, &refs).unwrap()
    }

    #[test]
    fn empty_buffer_full_loss_equals_finetune() {
        let d = small_detector(1);
        let batch = fixture_batch(&d);
        let eval = |mode| {
            let cfg = LearnConfig { mode, ..Default::default() };
            let mut g = Graph::new();
            total_loss_graph(&mut g, d.params(), &d, &batch, &[], &[], &cfg, None).unwrap().1
        };
        let full = eval(LearnMode::FullLoss);
        let ft = eval(LearnMode::FinetuneOnly);
        assert_eq!(full, ft);
        assert_eq!(full.total, full.l_ce);
        assert_eq!(full.k, 1.0);
    }

    #[test]
    fn finetune_ignores_buffer() {
        let d = small_detector(1);
        let batch = fixture_batch(&d);
        let e = entry([1.0, 2.0, 3.0], Label::Benign, [4.0, -4.0]);
        let cfg = LearnConfig {
            mode: LearnMode::FinetuneOnly,
            ..Default::default()
        };
        let mut g1 = Graph::new();
        let with = total_loss_graph(&mut g1, d.params(), &d, &batch, &[&e], &[&e], &cfg, None).unwrap().1;
        let mut g2 = Graph::new();
        let without = total_loss_graph(&mut g2, d.params(), &d, &batch, &[], &[], &cfg, None).unwrap().1;
        assert_eq!(with, without);
    }

    #[test]
    fn graph_breakdown_matches_standalone_losses() {
        let d = small_detector(2);
        let batch = fixture_batch(&d);
        let e1 = entry([0.3, -0.2, 0.9], Label::Malicious, [0.8, -0.1]);
        let e2 = entry([-0.5, 0.6, 0.1], Label::Benign, [-0.3, 0.4]);
        let cfg = LearnConfig::default();
        let mut g = Graph::new();
        let (_, b) = total_loss_graph(&mut g, d.params(), &d, &batch, &[&e1, &e2], &[&e2], &cfg, None).unwrap();
        let l_il = distillation_loss(&d, &[&e1, &e2], cfg.alpha).unwrap();
        let ce = buffer_ce_loss(&d, &[&e2]).unwrap();
        let expect = compose_total(b.l_ce, l_il, ce, cfg.alpha, cfg.gamma);
        assert!(close(b.total, expect.total, 1e-14));
        assert!(close(b.k, expect.k, 1e-15));
        assert!(close(b.l_lb, expect.l_lb, 1e-15));
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let e1 = entry([0.3, -0.2, 0.9], Label::Malicious, [0.8, -0.1]);
        let e2 = entry([-0.5, 0.6, 0.1], Label::Benign, [-0.3, 0.4]);
        for mode in LearnMode::ALL {
            let mut d = small_detector(5);
            let batch = fixture_batch(&d);
            let cfg = LearnConfig { mode, ..Default::default() };
            let k = {
                let mut g = Graph::new();
                total_loss_graph(&mut g, d.params(), &d, &batch, &[&e1], &[&e2], &cfg, None).unwrap().1.k
            };
            let model = d.clone();
            let report = crate::nn::gradient_check(d.params_mut(), 1e-5, |g, s| {
                Ok(total_loss_graph(g, s, &model, &batch, &[&e1], &[&e2], &cfg, Some(k))?.0)
            })
            .unwrap();
            assert!(report.passed(), "{mode}: {report:?}");
            assert!(report.max_abs_error < 1e-9, "{mode}: {report:?}");
        }
    }

    fn toy_data(n: usize, shift: f64, rng: &mut RngState) -> Vec<(DetectorInput, Label)> {
        use rand::Rng;
        (0..n)
            .map(|i| {
                let y = if i % 2 == 0 { Label::Benign } else { Label::Malicious };
                let c = if y == Label::Benign { -1.0 } else { 1.0 };
                let x = (0..3).map(|_| c * shift + rng.gen_range(-0.3..0.3)).collect();
                (DetectorInput(x), y)
            })
            .collect()
    }

    #[test]
    fn zero_capacity_round_matches_finetune() {
        let mut rng = RngState::seeded(4);
        let data = toy_data(40, 1.0, &mut rng);
        let run = |mode| {
            let mut d = small_detector(6);
            let mut b = ReplayBuffer::new(0);
            let mut r = RngState::seeded(77);
            let cfg = LearnConfig {
                mode,
                epochs_per_round: 3,
                batch_size: 8,
                ..Default::default()
            };
            let log = incremental_round(&mut d, &mut b, &data, &cfg, &mut r).unwrap();
            (d.params().clone(), log.iter().map(|l| l.loss.total).collect::<Vec<_>>())
        };
        assert_eq!(run(LearnMode::FullLoss), run(LearnMode::FinetuneOnly));
    }

    #[test]
    fn round_is_deterministic_and_counts_stream() {
        let mut rng = RngState::seeded(4);
        let data = toy_data(30, 1.0, &mut rng);
        let run = || {
            let mut d = small_detector(6);
            let mut b = ReplayBuffer::new(10);
            let mut r = RngState::seeded(3);
            b.offer(entry([0.0, 0.0, 0.0], Label::Benign, [0.1, 0.2]), &mut r);
            let cfg = LearnConfig {
                epochs_per_round: 2,
                batch_size: 7,
                ..Default::default()
            };
            let log = incremental_round(&mut d, &mut b, &data, &cfg, &mut r).unwrap();
            (d.params().clone(), b, log)
        };
        let (p1, b1, l1) = run();
        let (p2, b2, l2) = run();
        assert_eq!(p1, p2);
        assert_eq!(b1, b2);
        assert_eq!(l1, l2);
        assert_eq!(b1.seen(), 1 + 30);
        assert_eq!(l1.len(), 2 * 5);
        assert!(l1.iter().all(|r| r.loss.k > 0.5 && r.loss.k < 1.5));
    }

    #[test]
    fn every_epoch_policy_offers_each_sample_per_epoch() {
        let mut rng = RngState::seeded(4);
        let data = toy_data(30, 1.0, &mut rng);
        let mut d = small_detector(6);
        let mut b = ReplayBuffer::new(10);
        let cfg = LearnConfig {
            epochs_per_round: 3,
            batch_size: 7,
            offer: OfferPolicy::Every,
            ..Default::default()
        };
        incremental_round(&mut d, &mut b, &data, &cfg, &mut rng).unwrap();
        assert_eq!(b.seen(), 90);
        assert_eq!("every".parse::<OfferPolicy>().unwrap(), OfferPolicy::Every);
        assert!("sometimes".parse::<OfferPolicy>().is_err());
    }

    #[test]
    fn stored_logits_are_post_step_outputs() {
        let mut rng = RngState::seeded(8);
        let data = toy_data(5, 1.0, &mut rng);
        let mut d = small_detector(2);
        let mut b = ReplayBuffer::new(100);
        let cfg = LearnConfig {
            epochs_per_round: 1,
            batch_size: 5,
            ..Default::default()
        };
        incremental_round(&mut d, &mut b, &data, &cfg, &mut rng).unwrap();
        for e in b.entries() {
            let p = d.predict(&e.x).unwrap();
            assert_eq!(p.logits, e.z);
        }
    }

    #[test]
    fn empty_round_rejected() {
        let mut d = small_detector(2);
        let mut b = ReplayBuffer::new(1);
        let mut rng = RngState::seeded(0);
        assert!(incremental_round(&mut d, &mut b, &[], &LearnConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in LearnMode::ALL {
            assert_eq!(m.as_str().parse::<LearnMode>().unwrap(), m);
        }
        assert!("nope".parse::<LearnMode>().is_err());
    }

    #[test]
    fn csv_row_layout() {
        let row = LossLogRow {
            epoch: 1,
            step: 7,
            loss: compose_total(0.5, 0.0, 0.0, 0.5, 10.0),
        };
        assert_eq!(row.to_csv(), "1,7,0.5,0,0,1,0.5");
        assert!(loss_log_csv(&[row]).starts_with("epoch,step,l_ce,l_il,l_lb,k,total\n"));
    }

    #[test]
    fn config_validation() {
        assert!(LearnConfig::default().validate().is_ok());
        assert!(LearnConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(LearnConfig { gamma: 0.0, ..Default::default() }.validate().is_err());
    }
}
