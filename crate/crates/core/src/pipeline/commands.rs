//! File-to-file operations behind each CLI subcommand.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;

use super::checkpoint;
use super::config::PipelineConfig;
use super::engine::{Engine, PretrainReport};
use super::records::{read_flow_records, write_flow_records, FlowRecord};
use super::rounds::{run_rounds, EvalOutcome, RoundDataset, RoundSpec};
use super::synth::{generate, SynthSpec};
use crate::error::{Error, Result};
use crate::ingest::{assemble_flows, parse_packet_log, Label, LogFormat};
use crate::learner::{loss_log_csv, LearnMode, LossLogRow};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExtractSummary {
    pub packets: usize,
    pub flows: usize,
    pub malformed: usize,
    pub unsupported: u64,
}

pub fn read_flows(path: &Path) -> Result<Vec<FlowRecord>> {
    read_flow_records(File::open(path)?)
}

fn write_flows(path: &Path, flows: &[FlowRecord]) -> Result<()> {
    write_flow_records(BufWriter::new(File::create(path)?), flows)
}

pub fn cmd_extract(input: &Path, format: LogFormat, output: &Path) -> Result<ExtractSummary> {
    let parsed = parse_packet_log(File::open(input)?, format)?;
    let packets = parsed.records.len();
    let flows = assemble_flows(parsed.records);
    let records: Vec<FlowRecord> = flows
        .iter()
        .map(|f| FlowRecord::from_flow(f, None))
        .collect::<Result<_>>()?;
    write_flows(output, &records)?;
    Ok(ExtractSummary {
        packets,
        flows: records.len(),
        malformed: parsed.malformed.len(),
        unsupported: parsed.unsupported,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainSummary {
    pub flows: usize,
    pub buffer_len: usize,
    pub report: PretrainReport,
}

pub fn cmd_pretrain(flows: &Path, config: &PipelineConfig, out: &Path) -> Result<PretrainSummary> {
    let records = read_flows(flows)?;
    let refs: Vec<&FlowRecord> = records.iter().collect();
    let (engine, report) = Engine::pretrain(config.clone(), &refs)?;
    checkpoint::save(&engine, out)?;
    Ok(PretrainSummary {
        flows: records.len(),
        buffer_len: engine.buffer.len(),
        report,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateSummary {
    pub flows: usize,
    pub mode: LearnMode,
    pub buffer_len: usize,
    pub buffer_seen: u64,
    pub log: Vec<LossLogRow>,
}

/// `runtime` replaces the stored training settings (architecture must
/// match); `mode` overrides whichever config ends up in force.
pub fn cmd_update(
    checkpoint_in: &Path,
    flows: &Path,
    runtime: Option<&PipelineConfig>,
    mode: Option<LearnMode>,
    checkpoint_out: &Path,
    log_out: Option<&Path>,
) -> Result<UpdateSummary> {
    let mut engine = checkpoint::load(checkpoint_in, runtime)?;
    if let Some(cfg) = runtime {
        engine.apply_runtime_config(cfg)?;
    }
    if let Some(m) = mode {
        engine.config.mode = m;
    }
    let records = read_flows(flows)?;
    let refs: Vec<&FlowRecord> = records.iter().collect();
    let log = engine.update(&refs)?;
    checkpoint::save(&engine, checkpoint_out)?;
    if let Some(p) = log_out {
        std::fs::write(p, loss_log_csv(&log))?;
    }
    Ok(UpdateSummary {
        flows: records.len(),
        mode: engine.config.mode,
        buffer_len: engine.buffer.len(),
        buffer_seen: engine.buffer.seen(),
        log,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DetectSummary {
    pub flows: usize,
    pub benign: usize,
    pub malicious: usize,
}

pub const DETECT_HEADER: &str = "src,dst,sport,dport,proto,predicted,p_malicious";

fn label_name(l: Label) -> &'static str {
    match l {
        Label::Benign => "benign",
        Label::Malicious => "malicious",
    }
}

pub fn cmd_detect(checkpoint_in: &Path, flows: &Path, report: &Path) -> Result<DetectSummary> {
    let engine = checkpoint::load(checkpoint_in, None)?;
    let records = read_flows(flows)?;
    let refs: Vec<&FlowRecord> = records.iter().collect();
    let predictions = engine.detect(&refs)?;
    let mut csv = format!("{DETECT_HEADER}\n");
    let mut summary = DetectSummary {
        flows: records.len(),
        ..Default::default()
    };
    for (r, p) in records.iter().zip(&predictions) {
        let proto = serde_json::to_value(r.key.protocol)?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.key.src_ip,
            r.key.dst_ip,
            r.key.src_port,
            r.key.dst_port,
            proto.as_str().unwrap_or_default(),
            label_name(p.label),
            p.probabilities[1]
        );
        match p.label {
            Label::Benign => summary.benign += 1,
            Label::Malicious => summary.malicious += 1,
        }
    }
    std::fs::write(report, csv)?;
    Ok(summary)
}

pub fn cmd_eval_rounds(
    spec: &Path,
    config: &PipelineConfig,
    modes: &[LearnMode],
    report: &Path,
) -> Result<EvalOutcome> {
    let spec = RoundSpec::load(spec)?;
    let data = RoundDataset::from_spec(&spec, config.seed)?;
    let outcome = run_rounds(config, &data, modes)?;
    std::fs::write(report, outcome.to_csv())?;
    Ok(outcome)
}

pub fn cmd_synth(spec: &Path, seed: u64, output: &Path) -> Result<usize> {
    let spec = SynthSpec::from_json(&std::fs::read_to_string(spec)?)?;
    let flows = generate(&spec, seed)?;
    write_flows(output, &flows)?;
    Ok(flows.len())
}

/// Text table of the last round per mode, for terminals.
pub fn final_round_table(outcome: &EvalOutcome) -> Result<String> {
    let last = outcome
        .rows
        .iter()
        .map(|r| r.round)
        .max()
        .ok_or(Error::Empty("evaluation rows"))?;
    let mut s = format!("{:<10} {:>8} {:>8}", "mode", "accuracy", "f1");
    for f in &outcome.families {
        let _ = write!(s, " {:>10}", f);
    }
    s.push('\n');
    for r in outcome.rows.iter().filter(|r| r.round == last) {
        let _ = write!(s, "{:<10} {:>8.4} {:>8.4}", r.mode.as_str(), r.metrics.accuracy, r.metrics.f1);
        for f in &outcome.families {
            match r.family_accuracy(f) {
                Some(a) => {
                    let _ = write!(s, " {:>10.4}", a);
                }
                None => {
                    let _ = write!(s, " {:>10}", "-");
                }
            }
        }
        s.push('\n');
    }
    Ok(s)
}
