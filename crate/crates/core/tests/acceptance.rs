//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use etguard_core::buffer::{BufferEntry, ReplayBuffer};
use etguard_core::detector::{compute_metrics, DetectorConfig, DetectorModel};
use etguard_core::extractor::{AutoEncoderModel, DetectorInput, ExtractorConfig};
use etguard_core::ingest::{assemble_flows, Label, NormalizedSequence};
use etguard_core::learner::{kl_local_quadratic, total_loss_graph, LearnConfig, LearnMode, Minibatch};
use etguard_core::nn::{gradient_check, GradCheckReport, NdArray, RngState};
use etguard_core::pipeline::rounds::{
    advance, evaluate_round, pretrain_round0, run_rounds, RoundDataset, RoundLog, RoundSource, RoundSpec,
};
use etguard_core::pipeline::{
    checkpoint, synth, Engine, EvalOutcome, FamilySpec, FlowRecord, LengthComponent, PipelineConfig, RoundMetrics, SynthSpec,
};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = Result<Outcome, String>;

fn outcome(pass: bool, detail: String) -> Check {
    Ok(Outcome { pass, detail })
}

fn within(limit: Duration, started: Instant, o: Check) -> Check {
    let o = o?;
    let took = started.elapsed();
    let pass = o.pass && took < limit;
    outcome(pass, format!("{}; {:.1?} (limit {:?})", o.detail, took, limit))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- gradients

fn tiny_seq(buckets: &[usize], d_norm: f64, t_m_norm: f64) -> NormalizedSequence {
    let mut b = vec![4; 5];
    let mut mask = vec![false; 5];
    for (i, v) in buckets.iter().enumerate() {
        b[i] = *v;
        mask[i] = true;
    }
    NormalizedSequence { buckets: b, mask, d_norm, t_m_norm }
}

fn entry(x: &[f64], y: Label, z: [f64; 2]) -> BufferEntry {
    BufferEntry { x: DetectorInput(x.to_vec()), y, z }
}

fn gradients() -> Check {
    let mut reports: Vec<(String, GradCheckReport)> = Vec::new();
    let tol = 1e-5;

    let mut rng = RngState::seeded(11);
    let cfg = ExtractorConfig { seq_len: 5, embed_dim: 4, hidden: 2, layers: 1, buckets: 4, head_hidden: 3 };
    let mut ae = AutoEncoderModel::new(cfg, &mut rng).map_err(err)?;
    let frozen = ae.clone();
    let (a, b) = (tiny_seq(&[0, 3, 1], 0.1, 0.2), tiny_seq(&[2, 2, 1, 0, 3], 0.4, 0.05));
    let r = gradient_check(ae.params_mut(), tol, |g, s| frozen.loss_graph(g, s, &[&a, &b])).map_err(err)?;
    reports.push(("reconstruction".into(), r));

    let det_cfg = DetectorConfig { input: 4, hidden: vec![5, 3] };
    let mut det = DetectorModel::new(det_cfg, &mut rng).map_err(err)?;
    let data: Vec<(DetectorInput, Label)> = (0..4)
        .map(|i| {
            let x = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (DetectorInput(x), if i % 2 == 0 { Label::Benign } else { Label::Malicious })
        })
        .collect();
    let refs: Vec<&(DetectorInput, Label)> = data.iter().collect();
    let batch = Minibatch::new(&det, &refs).map_err(err)?;
    let replay = [
        entry(&[0.3, -0.2, 0.9, 0.1], Label::Malicious, [0.8, -0.1]),
        entry(&[-0.5, 0.6, 0.1, -0.7], Label::Benign, [-0.3, 0.4]),
    ];
    let replay_x = NdArray::from_rows(&replay.iter().map(|e| e.x.0.clone()).collect::<Vec<_>>()).map_err(err)?;
    let replay_z = NdArray::from_rows(&replay.iter().map(|e| e.z.to_vec()).collect::<Vec<_>>()).map_err(err)?;
    let replay_y: Vec<usize> = replay.iter().map(|e| e.y.index()).collect();
    let model = det.clone();

    let r = gradient_check(det.params_mut(), tol, |g, s| {
        let o = model.forward_graph(g, s, &batch.x)?;
        g.cross_entropy(o, &batch.y, &vec![1.0; batch.y.len()])
    })
    .map_err(err)?;
    reports.push(("detector cross-entropy".into(), r));

    let r = gradient_check(det.params_mut(), tol, |g, s| {
        let o = model.forward_graph(g, s, &replay_x)?;
        g.sq_dist(o, &replay_z, 0.5)
    })
    .map_err(err)?;
    reports.push(("distillation".into(), r));

    let r = gradient_check(det.params_mut(), tol, |g, s| {
        let o = model.forward_graph(g, s, &replay_x)?;
        g.cross_entropy(o, &replay_y, &[1.0, 1.0])
    })
    .map_err(err)?;
    reports.push(("buffer cross-entropy".into(), r));

    for mode in LearnMode::ALL {
        let lc = LearnConfig { mode, ..Default::default() };
        let (d_refs, c_refs) = ([&replay[0], &replay[1]], [&replay[1], &replay[0]]);
        let k = {
            let mut g = etguard_core::nn::Graph::new();
            total_loss_graph(&mut g, model.params(), &model, &batch, &d_refs, &c_refs, &lc, None)
                .map_err(err)?
                .1
                .k
        };
        let r = gradient_check(det.params_mut(), tol, |g, s| {
            Ok(total_loss_graph(g, s, &model, &batch, &d_refs, &c_refs, &lc, Some(k))?.0)
        })
        .map_err(err)?;
        reports.push((format!("total ({mode})"), r));
    }

    let worst = reports
        .iter()
        .map(|(n, r)| (n.as_str(), r.max_rel_error))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let failed: Vec<&str> = reports.iter().filter(|(_, r)| !r.passed()).map(|(n, _)| n.as_str()).collect();
    outcome(
        failed.is_empty(),
        format!(
            "{} losses, worst relative error {:.2e} ({}){}",
            reports.len(),
            worst.1,
            worst.0,
            if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- KL

fn kl_quadratic() -> Check {
    let mut rng = RngState::seeded(0);
    let pairs = 100;
    let mut not_decreasing = 0;
    let mut worst_rel: f64 = 0.0;
    for _ in 0..pairs {
        let dim = rng.gen_range(2..=10);
        let (p, delta) = common::simplex_pair(dim, 0.1, &mut rng);
        let mut scaled = Vec::new();
        for eps in [1e-1, 1e-2, 1e-3] {
            let q = kl_local_quadratic(&p, &delta, eps).map_err(err)?;
            scaled.push(q.residual.abs() / (eps * eps));
            if eps == 1e-3 {
                worst_rel = worst_rel.max((q.kl - q.weighted_euclid).abs() / q.kl);
            }
        }
        if !(scaled[0] > scaled[1] && scaled[1] > scaled[2]) {
            not_decreasing += 1;
        }
    }
    outcome(
        not_decreasing == 0 && worst_rel < 0.01,
        format!(
            "{pairs} pairs, {not_decreasing} without strict decrease, worst relative gap at eps=1e-3 {:.2e}",
            worst_rel
        ),
    )
}

// ---------------------------------------------------------------- reservoir

fn reservoir() -> Check {
    let (capacity, stream, trials) = (100usize, 1000usize, 5000usize);
    let mut rng = RngState::seeded(0);
    let mut counts = vec![0u64; stream];
    for _ in 0..trials {
        let mut b = ReplayBuffer::new(capacity);
        for i in 0..stream {
            b.offer(entry(&[i as f64], Label::Benign, [0.0, 0.0]), &mut rng);
        }
        for e in b.entries() {
            counts[e.x.0[0] as usize] += 1;
        }
    }
    let expected = (trials * capacity) as f64 / stream as f64;
    let freqs: Vec<f64> = counts.iter().map(|c| *c as f64 / trials as f64).collect();
    let (lo, hi) = freqs.iter().fold((1.0f64, 0.0f64), |(l, h), f| (l.min(*f), h.max(*f)));
    let stat: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
    let p = ChiSquared::new((stream - 1) as f64).map_err(err)?.sf(stat);
    outcome(
        lo >= 0.08 && hi <= 0.12 && p > 0.001,
        format!("inclusion frequency in [{lo:.4}, {hi:.4}], chi-square {stat:.1} on {} df, p = {p:.4}", stream - 1),
    )
}

// ---------------------------------------------------------------- flows

fn flow_assembly() -> Check {
    let mut rng = RngState::seeded(0);
    let logs = 1000;
    let mut mismatches = 0;
    let mut packets = 0usize;
    for _ in 0..logs {
        let n = rng.gen_range(0..=10_000);
        let keys = rng.gen_range(1..=20);
        let log = common::random_log(&mut rng, n, keys);
        packets += n;
        if assemble_flows(log.clone()) != common::brute_force_flows(&log) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{logs} logs, {packets} packets, {mismatches} mismatches"))
}

// ---------------------------------------------------------------- detection

fn family(name: &str, label: Label, flows: usize, packets: f64, lengths: &[(f64, f64, f64)], gap: f64) -> FamilySpec {
    FamilySpec {
        name: name.into(),
        label,
        flows,
        mean_packets: packets,
        lengths: lengths.iter().map(|(weight, mean, std)| LengthComponent { weight: *weight, mean: *mean, std: *std }).collect(),
        mean_gap: gap,
    }
}

fn detection() -> Check {
    let spec = SynthSpec {
        families: vec![
            family("benign", Label::Benign, 500, 20.0, &[(0.6, 600.0, 80.0), (0.4, 900.0, 100.0)], 0.3),
            family("malicious", Label::Malicious, 500, 20.0, &[(0.5, 700.0, 120.0), (0.5, 1200.0, 100.0)], 0.05),
        ],
    };
    let flows = synth::generate(&spec, 0).map_err(err)?;
    let (mut train, mut test): (Vec<&FlowRecord>, Vec<&FlowRecord>) = (Vec::new(), Vec::new());
    for fam in &spec.families {
        let of: Vec<&FlowRecord> = flows.iter().filter(|f| f.family.as_deref() == Some(fam.name.as_str())).collect();
        let cut = of.len() * 7 / 10;
        train.extend(&of[..cut]);
        test.extend(&of[cut..]);
    }
    let (engine, _) = Engine::pretrain(PipelineConfig::default(), &train).map_err(err)?;
    let predicted: Vec<Label> = engine.detect(&test).map_err(err)?.into_iter().map(|p| p.label).collect();
    let truth: Vec<Label> = test.iter().map(|f| f.labeled()).collect::<Result<_, _>>().map_err(err)?;
    let m = compute_metrics(&predicted, &truth).map_err(err)?;
    outcome(
        m.f1 >= 0.95,
        format!("{} train / {} held-out flows, F1 {:.4}, accuracy {:.4}", train.len(), test.len(), m.f1, m.accuracy),
    )
}

// ---------------------------------------------------------------- rounds

const SEEDS: [u64; 3] = [1, 2, 3];

fn round_spec() -> RoundSpec {
    let mixed = [(0.6, 600.0, 80.0), (0.4, 900.0, 100.0)];
    RoundSpec {
        source: RoundSource::Synth(SynthSpec {
            families: vec![
                family("benign", Label::Benign, 900, 30.0, &mixed, 0.3),
                family("a0", Label::Malicious, 300, 30.0, &mixed, 0.01),
                family("a1", Label::Malicious, 300, 30.0, &mixed, 6.0),
                family("a2", Label::Malicious, 300, 30.0, &[(1.0, 1300.0, 60.0)], 0.3),
            ],
        }),
        rounds: vec![
            vec!["benign".into(), "a0".into()],
            vec!["benign".into(), "a1".into()],
            vec!["benign".into(), "a2".into()],
        ],
        test_fraction: 0.3,
    }
}

fn round_config(seed: u64) -> PipelineConfig {
    PipelineConfig { seed, buffer_capacity: 200, ..PipelineConfig::default() }
}

fn run_seed(seed: u64) -> Result<(RoundDataset, EvalOutcome), String> {
    let data = RoundDataset::from_spec(&round_spec(), seed).map_err(err)?;
    let out = run_rounds(&round_config(seed), &data, &LearnMode::ALL).map_err(err)?;
    Ok((data, out))
}

fn anti_forgetting(runs: &[(u64, EvalOutcome)]) -> Check {
    let mut pass = true;
    let mut parts = Vec::new();
    for (seed, out) in runs {
        let last = 2;
        let row = |m| out.row(m, last).ok_or_else(|| format!("missing final row for {m}"));
        let (full, et, v) = (row(LearnMode::Joint)?, row(LearnMode::FullLoss)?, row(LearnMode::FinetuneOnly)?);
        let (fa, ea, va) = (full.metrics.accuracy, et.metrics.accuracy, v.metrics.accuracy);
        let fam0 = |r: &RoundMetrics| r.family_accuracy("a0").unwrap_or(f64::NAN);
        let (e0, v0) = (fam0(et), fam0(v));
        let ok = fa >= ea && ea >= va && e0 - v0 >= 0.10 && fa - ea <= 0.10;
        pass &= ok;
        parts.push(format!(
            "seed {seed}: full {fa:.3} etguard {ea:.3} etguard-v {va:.3}, family a0 {e0:.3} vs {v0:.3}{}",
            if ok { "" } else { " (violated)" }
        ));
    }
    outcome(pass, parts.join("; "))
}

fn k_bounds(runs: &[(u64, EvalOutcome)]) -> Check {
    let mut steps = 0;
    let mut out_of_range = 0;
    let mut empty_steps = 0;
    let mut empty_bad = 0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, out) in runs {
        for log in &out.logs {
            for row in &log.rows {
                let k = row.loss.k;
                steps += 1;
                lo = lo.min(k);
                hi = hi.max(k);
                if !(k > 0.5 && k < 1.5) {
                    out_of_range += 1;
                }
                if log.mode == LearnMode::FullLoss && log.buffer_len == 0 {
                    empty_steps += 1;
                    if k != 1.0 {
                        empty_bad += 1;
                    }
                }
            }
        }
    }
    // an empty buffer never arises above, so replay one seed without one
    let data = RoundDataset::from_spec(&round_spec(), SEEDS[0]).map_err(err)?;
    let cfg = PipelineConfig { buffer_capacity: 0, ..round_config(SEEDS[0]) };
    let empty = run_rounds(&cfg, &data, &[LearnMode::FullLoss]).map_err(err)?;
    for log in &empty.logs {
        for row in &log.rows {
            empty_steps += 1;
            if row.loss.k != 1.0 {
                empty_bad += 1;
            }
        }
    }
    outcome(
        out_of_range == 0 && empty_bad == 0 && empty_steps > 0,
        format!(
            "{steps} logged steps, k in [{lo:.6}, {hi:.6}], {out_of_range} out of range; {empty_steps} empty-buffer steps, {empty_bad} with k != 1"
        ),
    )
}

fn bits(out: &EvalOutcome) -> Vec<u64> {
    let mut v = Vec::new();
    for r in &out.rows {
        let m = &r.metrics;
        v.extend([m.accuracy, m.precision, m.recall, m.f1].map(f64::to_bits));
        v.extend(r.per_family.iter().map(|(_, a)| a.to_bits()));
    }
    for l in &out.logs {
        for row in &l.rows {
            let b = &row.loss;
            v.extend([b.l_ce, b.l_il, b.l_lb, b.k, b.total].map(f64::to_bits));
        }
    }
    v
}

fn determinism(runs: &[(u64, EvalOutcome)]) -> Check {
    let mut reruns_equal = true;
    for (seed, out) in runs {
        let (_, again) = run_seed(*seed)?;
        reruns_equal &= again.to_csv() == out.to_csv() && bits(&again) == bits(out);
    }

    let seed = SEEDS[0];
    let mode = LearnMode::FullLoss;
    let data = RoundDataset::from_spec(&round_spec(), seed).map_err(err)?;
    let base = pretrain_round0(&round_config(seed), &data).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("mid.ckpt");
    let run = |reload: bool| -> Result<(Vec<RoundLog>, Vec<RoundMetrics>, Vec<u8>), String> {
        let mut engine = base.clone();
        let (mut logs, mut rows) = (Vec::new(), Vec::new());
        for round in 1..data.rounds.len() {
            logs.push(advance(&mut engine, &data, round, mode).map_err(err)?);
            rows.push(evaluate_round(&engine, &data, round, mode).map_err(err)?);
            if reload {
                checkpoint::save(&engine, &path).map_err(err)?;
                engine = checkpoint::load(&path, None).map_err(err)?;
            }
        }
        Ok((logs, rows, checkpoint::to_bytes(&engine).map_err(err)?))
    };
    let (straight, resumed) = (run(false)?, run(true)?);
    let same_logs = straight.0 == resumed.0 && straight.1 == resumed.1;
    let same_state = straight.2 == resumed.2;
    outcome(
        reruns_equal && same_logs && same_state,
        format!(
            "reruns identical: {reruns_equal}; save/load between rounds matches uninterrupted run: logs {same_logs}, final state {same_state}"
        ),
    )
}

fn report(id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Check) -> bool {
    let started = Instant::now();
    let result = within(limit, started, f());
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("[{}] {id}. {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() -> ExitCode {
    let minute = Duration::from_secs(60);
    let mut results = vec![
        report(1, "gradient suite", minute, gradients),
        report(2, "KL local quadratic", Duration::from_secs(10), kl_quadratic),
        report(3, "reservoir uniformity", minute, reservoir),
        report(4, "flow assembly oracle", minute, flow_assembly),
        report(5, "desk-scale detection", 5 * minute, detection),
    ];

    let started = Instant::now();
    let runs: Result<Vec<(u64, EvalOutcome)>, String> =
        SEEDS.iter().map(|s| run_seed(*s).map(|(_, o)| (*s, o))).collect();
    let rounds_time = started.elapsed();
    match runs {
        Ok(runs) => {
            results.push(report(6, "anti-forgetting ordering", 15 * minute, || {
                let o = anti_forgetting(&runs)?;
                outcome(o.pass && rounds_time < 15 * minute, format!("{}; rounds took {:.1?}", o.detail, rounds_time))
            }));
            results.push(report(7, "k bounds", 15 * minute, || k_bounds(&runs)));
            results.push(report(8, "determinism and persistence", 15 * minute, || determinism(&runs)));
        }
        Err(e) => {
            for (id, name) in [(6, "anti-forgetting ordering"), (7, "k bounds"), (8, "determinism and persistence")] {
                println!("[FAIL] {id}. {name}: error: {e}");
                results.push(false);
            }
        }
    }
    let passed = results.iter().filter(|p| **p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
