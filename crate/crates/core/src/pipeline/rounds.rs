//! Multi-round evaluation: pretrain on round 0, update on each later round,
//! and after every round score the detector on the held-out flows of every
//! family introduced so far.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::engine::Engine;
use super::records::{read_flow_records, FlowRecord};
use super::synth::{generate, SynthSpec};
use crate::detector::{compute_metrics, MetricsReport};
use crate::error::{Error, Result};
use crate::ingest::Label;
use crate::learner::{LearnMode, LossLogRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundSource {
    /// Generated with the run seed.
    Synth(SynthSpec),
    /// Family-tagged flow records; relative paths resolve against the spec
    /// file's directory.
    Flows(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSpec {
    pub source: RoundSource,
    /// Family names trained on in each round.
    pub rounds: Vec<Vec<String>>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.3
}

impl RoundSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let mut spec: RoundSpec = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("round spec {}: {e}", path.display())))?;
        if let RoundSource::Flows(p) = &mut spec.source {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundData {
    pub families: Vec<String>,
    pub train: Vec<FlowRecord>,
    /// Held-out flows of the families first seen in this round.
    pub test: Vec<FlowRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundDataset {
    pub rounds: Vec<RoundData>,
    /// Families in order of first appearance.
    pub families: Vec<String>,
}

impl RoundDataset {
    /// Splits each family's flows (in source order) into a training head
    /// and a held-out tail; the head is divided evenly over the rounds that
    /// list the family.
    pub fn build(spec: &RoundSpec, flows: Vec<FlowRecord>) -> Result<Self> {
        if spec.rounds.len() < 2 {
            return Err(Error::Config("round spec needs at least 2 rounds".into()));
        }
        if !(0.0..1.0).contains(&spec.test_fraction) {
            return Err(Error::Config(format!("test_fraction {} outside [0, 1)", spec.test_fraction)));
        }
        let mut by_family: HashMap<String, Vec<FlowRecord>> = HashMap::new();
        for f in flows {
            let fam = f
                .family
                .clone()
                .ok_or_else(|| Error::Config(format!("flow {:?} has no family tag", f.key)))?;
            f.labeled()?;
            by_family.entry(fam).or_default().push(f);
        }
        let mut appearances: HashMap<&str, usize> = HashMap::new();
        let mut families = Vec::new();
        for (i, round) in spec.rounds.iter().enumerate() {
            if round.is_empty() {
                return Err(Error::Config(format!("round {i} lists no families")));
            }
            let unique: BTreeSet<&String> = round.iter().collect();
            if unique.len() != round.len() {
                return Err(Error::Config(format!("round {i} lists a family twice")));
            }
            for name in round {
                if !by_family.contains_key(name) {
                    return Err(Error::Config(format!("round {i}: unknown family `{name}`")));
                }
                *appearances.entry(name).or_default() += 1;
                if !families.contains(name) {
                    families.push(name.clone());
                }
            }
        }

        let mut train_chunks: HashMap<String, std::vec::IntoIter<Vec<FlowRecord>>> = HashMap::new();
        let mut tests: HashMap<String, Vec<FlowRecord>> = HashMap::new();
        for name in &families {
            let mut all = by_family.remove(name).unwrap();
            let n_test = (all.len() as f64 * spec.test_fraction).round() as usize;
            let test = all.split_off(all.len() - n_test);
            let parts = appearances[name.as_str()];
            if all.len() < parts {
                return Err(Error::Config(format!(
                    "family `{name}` has {} training flows for {parts} rounds",
                    all.len()
                )));
            }
            let (base, extra) = (all.len() / parts, all.len() % parts);
            let mut chunks = Vec::with_capacity(parts);
            let mut rest = all.into_iter();
            for p in 0..parts {
                chunks.push(rest.by_ref().take(base + usize::from(p < extra)).collect());
            }
            train_chunks.insert(name.clone(), chunks.into_iter());
            tests.insert(name.clone(), test);
        }

        let mut introduced = BTreeSet::new();
        let rounds = spec
            .rounds
            .iter()
            .map(|names| {
                let mut train = Vec::new();
                let mut test = Vec::new();
                for name in names {
                    train.extend(train_chunks.get_mut(name).unwrap().next().unwrap());
                    if introduced.insert(name.clone()) {
                        test.extend(tests.remove(name).unwrap());
                    }
                }
                RoundData {
                    families: names.clone(),
                    train,
                    test,
                }
            })
            .collect();
        Ok(RoundDataset { rounds, families })
    }

    pub fn from_spec(spec: &RoundSpec, seed: u64) -> Result<Self> {
        let flows = match &spec.source {
            RoundSource::Synth(s) => generate(s, seed)?,
            RoundSource::Flows(p) => read_flow_records(std::fs::File::open(p)?)?,
        };
        Self::build(spec, flows)
    }

    /// Held-out flows of every family introduced in rounds `0..=round`.
    pub fn cumulative_test(&self, round: usize) -> Vec<&FlowRecord> {
        self.rounds[..=round].iter().flat_map(|r| &r.test).collect()
    }

    /// Training flows of rounds `0..=round`.
    pub fn cumulative_train(&self, round: usize) -> Vec<&FlowRecord> {
        self.rounds[..=round].iter().flat_map(|r| &r.train).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub mode: LearnMode,
    pub round: usize,
    pub test_families: Vec<String>,
    pub n_test: usize,
    pub metrics: MetricsReport,
    /// Accuracy on each family's held-out flows, in dataset family order.
    pub per_family: Vec<(String, f64)>,
}

impl RoundMetrics {
    pub fn family_accuracy(&self, name: &str) -> Option<f64> {
        self.per_family.iter().find(|(n, _)| n == name).map(|(_, a)| *a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub mode: LearnMode,
    pub round: usize,
    /// Replay buffer size when the round started.
    pub buffer_len: usize,
    pub rows: Vec<LossLogRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub families: Vec<String>,
    pub rows: Vec<RoundMetrics>,
    pub logs: Vec<RoundLog>,
}

impl EvalOutcome {
    pub fn row(&self, mode: LearnMode, round: usize) -> Option<&RoundMetrics> {
        self.rows.iter().find(|r| r.mode == mode && r.round == round)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,round,families,n_test,accuracy,precision,recall,f1");
        for f in &self.families {
            let _ = write!(s, ",acc_{f}");
        }
        s.push('\n');
        for r in &self.rows {
            let m = &r.metrics;
            let _ = write!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.mode,
                r.round,
                r.test_families.join("|"),
                r.n_test,
                m.accuracy,
                m.precision,
                m.recall,
                m.f1
            );
            for f in &self.families {
                match r.family_accuracy(f) {
                    Some(a) => {
                        let _ = write!(s, ",{a}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Scores `engine` on the cumulative test set of `round`.
pub fn evaluate_round(engine: &Engine, data: &RoundDataset, round: usize, mode: LearnMode) -> Result<RoundMetrics> {
    let test = data.cumulative_test(round);
    if test.is_empty() {
        return Err(Error::Empty("cumulative test set"));
    }
    let predicted: Vec<Label> = engine.detect(&test)?.into_iter().map(|p| p.label).collect();
    let truth: Vec<Label> = test.iter().map(|f| f.labeled()).collect::<Result<_>>()?;
    let metrics = compute_metrics(&predicted, &truth)?;
    let mut per_family = Vec::new();
    let mut test_families = Vec::new();
    for fam in &data.families {
        let idx: Vec<usize> = (0..test.len())
            .filter(|i| test[*i].family.as_deref() == Some(fam.as_str()))
            .collect();
        if idx.is_empty() {
            continue;
        }
        let correct = idx.iter().filter(|i| predicted[**i] == truth[**i]).count();
        per_family.push((fam.clone(), correct as f64 / idx.len() as f64));
        test_families.push(fam.clone());
    }
    Ok(RoundMetrics {
        mode,
        round,
        test_families,
        n_test: test.len(),
        metrics,
        per_family,
    })
}

pub fn pretrain_round0(config: &PipelineConfig, data: &RoundDataset) -> Result<Engine> {
    let train: Vec<&FlowRecord> = data.rounds[0].train.iter().collect();
    Ok(Engine::pretrain(config.clone(), &train)?.0)
}

/// Runs update round `round` in `mode`. The joint mode retrains on every
/// training flow seen so far; the others see only this round's flows.
pub fn advance(engine: &mut Engine, data: &RoundDataset, round: usize, mode: LearnMode) -> Result<RoundLog> {
    let flows: Vec<&FlowRecord> = match mode {
        LearnMode::Joint => data.cumulative_train(round),
        _ => data.rounds[round].train.iter().collect(),
    };
    let buffer_len = engine.buffer.len();
    let inputs = engine.labeled_inputs(&flows)?;
    let rows = engine.update_inputs(&inputs, mode)?;
    Ok(RoundLog {
        mode,
        round,
        buffer_len,
        rows,
    })
}

/// Continues `engine` from round `from` to the last round, evaluating after
/// each.
pub fn run_mode_from(
    engine: &mut Engine,
    data: &RoundDataset,
    mode: LearnMode,
    from: usize,
) -> Result<(Vec<RoundMetrics>, Vec<RoundLog>)> {
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for round in from..data.rounds.len() {
        logs.push(advance(engine, data, round, mode)?);
        rows.push(evaluate_round(engine, data, round, mode)?);
    }
    Ok((rows, logs))
}

/// Pretrains once and replays the remaining rounds in each of `modes`, all
/// starting from the same pretrained state.
pub fn run_rounds(config: &PipelineConfig, data: &RoundDataset, modes: &[LearnMode]) -> Result<EvalOutcome> {
    if modes.is_empty() {
        return Err(Error::Config("no modes requested".into()));
    }
    let base = pretrain_round0(config, data)?;
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for &mode in modes {
        let mut engine = base.clone();
        engine.config.mode = mode;
        rows.push(evaluate_round(&engine, data, 0, mode)?);
        let (r, l) = run_mode_from(&mut engine, data, mode, 1)?;
        rows.extend(r);
        logs.extend(l);
    }
    Ok(EvalOutcome {
        families: data.families.clone(),
        rows,
        logs,
    })
}
