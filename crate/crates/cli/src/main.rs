use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use etguard_core::ingest::LogFormat;
use etguard_core::learner::LearnMode;
use etguard_core::pipeline::commands;
use etguard_core::pipeline::PipelineConfig;

/// Malicious encrypted-traffic detection with incremental updates.
#[derive(Parser, Debug)]
#[command(name = "etguard", version)]
struct Cli {
    /// Config file with one `key = value` per line.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the config seed (pretrain, synth, eval-rounds).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Learning mode: etguard, etguard-v or full.
    #[arg(long, global = true, value_name = "MODE")]
    mode: Option<LearnMode>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Group a packet log into flows and write one JSON record per flow.
    Extract {
        #[arg(long)]
        input: PathBuf,
        /// jsonl or pcap
        #[arg(long, default_value = "jsonl")]
        format: LogFormat,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate labeled synthetic flows from a family spec (JSON).
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the extractor and detector on labeled flows and seed the buffer.
    Pretrain {
        #[arg(long)]
        flows: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one incremental round on new labeled flows.
    Update {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        flows: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Label flows with a trained checkpoint and write a CSV report.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        flows: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the cumulative round protocol and write a metrics CSV.
    /// Without --mode all three modes are compared.
    EvalRounds {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

fn config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Extract { input, format, output } => {
            let s = commands::cmd_extract(input, *format, output)
                .with_context(|| format!("extracting {}", input.display()))?;
            println!(
                "{} packets -> {} flows ({} malformed records skipped, {} non-TCP/UDP packets ignored)",
                s.packets, s.flows, s.malformed, s.unsupported
            );
        }
        Command::Synth { spec, output } => {
            let n = commands::cmd_synth(spec, config(cli)?.seed, output)?;
            println!("{n} flows written to {}", output.display());
        }
        Command::Pretrain { flows, out } => {
            let s = commands::cmd_pretrain(flows, &config(cli)?, out)?;
            let m = &s.report.train_metrics;
            println!(
                "pretrained on {} flows: train accuracy {:.4}, F1 {:.4}; buffer holds {}",
                s.flows, m.accuracy, m.f1, s.buffer_len
            );
        }
        Command::Update { checkpoint, flows, out, log } => {
            let runtime = match &cli.config {
                Some(_) => Some(config(cli)?),
                None => None,
            };
            let s = commands::cmd_update(checkpoint, flows, runtime.as_ref(), cli.mode, out, log.as_deref())?;
            let last = s.log.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
            println!(
                "{} update on {} flows: {} steps, final loss {:.6}; buffer {} of {} seen",
                s.mode,
                s.flows,
                s.log.len(),
                last,
                s.buffer_len,
                s.buffer_seen
            );
        }
        Command::Detect { checkpoint, flows, report } => {
            let s = commands::cmd_detect(checkpoint, flows, report)?;
            println!("{} flows: {} benign, {} malicious", s.flows, s.benign, s.malicious);
        }
        Command::EvalRounds { spec, report } => {
            let cfg = config(cli)?;
            let modes = match cli.mode {
                Some(m) => vec![m],
                None => LearnMode::ALL.to_vec(),
            };
            let outcome = commands::cmd_eval_rounds(spec, &cfg, &modes, report)?;
            print!("{}", commands::final_round_table(&outcome)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
