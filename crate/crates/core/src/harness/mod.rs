//! Seeded multi-run execution, aggregation, reports and replay.
//!
//! Run `i` of a batch draws from stream `i` of a ChaCha20 generator keyed
//! by the configured seed ([`crate::protocols::run_rng`]). Runs execute in
//! parallel and are stored by index.

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{parse_postselect, ExperimentRef, Mode, PolicyRef, RunConfig};
pub use report::{Empirical, Frequency, PostSelected, Report, RunSummary, Tally, Transcript, ViolationLog, SCHEMA_VERSION, UNMEASURED};

use crate::policies::{prediction_matrix, Policy};
use crate::protocols::{Engine, ExperimentScript, ProtocolError, RunTrace, Verdict, RNG_ALGORITHM};

/// Post-selected (or, without a predicate, contradiction) runs whose full
/// transcript goes into the report.
pub const TRANSCRIPT_LIMIT: usize = 3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("determinism error: {0}")]
    Determinism(String),
    #[error("run index {index} out of range (report has {runs} runs)")]
    RunIndex { index: u64, runs: u64 },
    #[error("report error: {0}")]
    Report(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn digest(config: &RunConfig, script: &ExperimentScript) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(serde_json::to_vec(script).expect("script serializes"));
    hex::encode(h.finalize())
}

fn outcome_string(outcomes: &[(String, String)]) -> String {
    outcomes.iter().map(|(v, x)| format!("{v}={x}")).collect::<Vec<_>>().join(" ")
}

/// Runs a config whose relative custom-script paths resolve against `base`.
pub fn run_with_base(config: &RunConfig, base: Option<&Path>) -> Result<Report> {
    let script = config.experiment.load(base)?;
    let policy = config.policy.resolve()?;
    run_script(config, script, policy)
}

/// Runs a config; custom-script paths resolve against the working directory.
pub fn run(config: &RunConfig) -> Result<Report> {
    run_with_base(config, None)
}

fn run_script(config: &RunConfig, script: ExperimentScript, policy: Policy) -> Result<Report> {
    if config.runs == 0 {
        return Err(HarnessError::Config("runs: must be at least 1".into()));
    }
    let engine = Engine::new(&script, &policy)?;
    let predicate = match &config.postselect {
        Some(p) => Some(parse_postselect(p, engine.experiment())?),
        None => None,
    };
    let mut report = Report {
        schema_version: SCHEMA_VERSION.into(),
        rng_algorithm: RNG_ALGORITHM.into(),
        build: format!("friendsim {}", env!("CARGO_PKG_VERSION")),
        config: config.clone(),
        digest: digest(config, &script),
        variables: engine.experiment().variables().to_vec(),
        script,
        policy: policy.clone(),
        exact: None,
        empirical: None,
        matrix: None,
        runs: Vec::new(),
        transcripts: Vec::new(),
        violations: Vec::new(),
    };
    match config.mode {
        Mode::Exact => {
            let analysis = engine.analysis();
            report.violations = violation_log(analysis.branches.iter().filter_map(|b| b.violation.as_ref()).map(|v| v.to_string()));
            report.exact = Some(analysis);
        }
        Mode::Matrix => {
            let mut policies = Policy::builtins();
            if !policies.contains(&policy) {
                policies.push(policy);
            }
            report.matrix = Some(prediction_matrix(std::slice::from_ref(&report.script), &policies)?);
        }
        Mode::Sample => sample(&engine, config, predicate.as_deref(), &mut report),
    }
    Ok(report)
}

fn violation_log(messages: impl Iterator<Item = String>) -> Vec<ViolationLog> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for m in messages {
        *counts.entry(m).or_default() += 1;
    }
    counts.into_iter().map(|(message, runs)| ViolationLog { message, runs }).collect()
}

fn sample(engine: &Engine, config: &RunConfig, predicate: Option<&[(String, String)]>, report: &mut Report) {
    let picks: Vec<usize> = (0..config.runs)
        .into_par_iter()
        .map(|i| engine.sample_branch(&mut crate::protocols::run_rng(config.seed, i)))
        .collect();
    let branches = engine.branches();
    let accepts = |b: usize| match predicate {
        Some(p) => p.iter().all(|(v, x)| branches[b].trace.outcome(v) == Some(x.as_str())),
        None => branches[b].trace.verdict == Verdict::Contradiction,
    };
    let variables: Vec<(String, Vec<String>)> = report
        .variables
        .iter()
        .map(|v| (v.name.clone(), v.values.clone()))
        .collect();
    let all = tally(branches, &picks, &variables);
    let contradictions = picks.iter().filter(|&&b| branches[b].trace.verdict == Verdict::Contradiction).count() as u64;
    let postselected = predicate.map(|p| {
        let kept: Vec<usize> = picks.iter().copied().filter(|&b| accepts(b)).collect();
        PostSelected { predicate: p.to_vec(), tally: tally(branches, &kept, &variables) }
    });
    report.transcripts = picks
        .iter()
        .enumerate()
        .filter(|(_, &b)| accepts(b))
        .take(TRANSCRIPT_LIMIT)
        .map(|(i, &b)| Transcript { index: i as u64, lines: branches[b].trace.transcript.clone() })
        .collect();
    report.violations = violation_log(picks.iter().filter_map(|&b| branches[b].trace.violation.as_ref()).map(|v| v.to_string()));
    report.runs = picks
        .iter()
        .enumerate()
        .map(|(i, &b)| RunSummary {
            index: i as u64,
            outcomes: outcome_string(&branches[b].trace.outcomes),
            verdict: branches[b].trace.verdict,
        })
        .collect();
    report.empirical = Some(Empirical {
        contradiction_rate: Frequency::new(Verdict::Contradiction.as_str(), contradictions, config.runs),
        all,
        postselected,
    });
}

fn tally(branches: &[crate::protocols::Branch], picks: &[usize], variables: &[(String, Vec<String>)]) -> Tally {
    let n = picks.len() as u64;
    let mut per_branch = vec![0u64; branches.len()];
    for &b in picks {
        per_branch[b] += 1;
    }
    let mut marginals = BTreeMap::new();
    for (var, values) in variables {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for (b, &c) in per_branch.iter().enumerate() {
            let value = branches[b].trace.outcome(var).unwrap_or(UNMEASURED).to_string();
            *counts.entry(value).or_default() += c;
        }
        let mut order: Vec<String> = values.clone();
        order.extend(counts.keys().filter(|k| !values.contains(k)).cloned());
        let freqs = order
            .into_iter()
            .filter(|v| (values.contains(v) && v != crate::circuit::OTHER) || counts.get(v).copied().unwrap_or(0) > 0)
            .map(|v| {
                let c = counts.get(&v).copied().unwrap_or(0);
                Frequency::new(v, c, n)
            })
            .collect();
        marginals.insert(var.clone(), freqs);
    }
    let mut joint: BTreeMap<String, u64> = BTreeMap::new();
    for (b, &c) in per_branch.iter().enumerate() {
        if c > 0 {
            *joint.entry(outcome_string(&branches[b].trace.outcomes)).or_default() += c;
        }
    }
    let verdicts = Verdict::ALL
        .iter()
        .map(|v| {
            let c = per_branch.iter().enumerate().filter(|(b, _)| branches[*b].trace.verdict == *v).map(|(_, c)| c).sum();
            Frequency::new(v.as_str(), c, n)
        })
        .collect();
    Tally { runs: n, marginals, joint: joint.into_iter().map(|(k, c)| Frequency::new(k, c, n)).collect(), verdicts }
}

/// Re-executes run `index` of a sampled report and checks it against the
/// stored summary. `seed` (if given) must equal the report's seed.
pub fn replay(report: &Report, index: u64, seed: Option<u64>) -> Result<RunTrace> {
    if report.schema_version != SCHEMA_VERSION {
        return Err(HarnessError::Report(format!("unsupported schema `{}`", report.schema_version)));
    }
    if let Some(s) = seed {
        if s != report.config.seed {
            return Err(HarnessError::Determinism(format!(
                "replay seed {s} differs from the report's seed {}; the run cannot be reproduced",
                report.config.seed
            )));
        }
    }
    if digest(&report.config, &report.script) != report.digest {
        return Err(HarnessError::Determinism("report digest does not match its config and script".into()));
    }
    let runs = report.runs.len() as u64;
    if index >= runs {
        return Err(HarnessError::RunIndex { index, runs });
    }
    let engine = Engine::new(&report.script, &report.policy)?;
    let trace = engine.execute_stream(report.config.seed, index);
    let stored = &report.runs[index as usize];
    let outcomes = outcome_string(&trace.outcomes);
    if outcomes != stored.outcomes || trace.verdict != stored.verdict {
        return Err(HarnessError::Determinism(format!(
            "run {index} replayed as `{outcomes}` ({}) but the report has `{}` ({})",
            trace.verdict, stored.outcomes, stored.verdict
        )));
    }
    Ok(trace)
}

/// Writes `<out>` (JSON) and `<out>.txt` (summary) and returns both paths.
pub fn write_report(report: &Report, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let text_path = {
        let mut p = out.as_os_str().to_owned();
        p.push(".txt");
        PathBuf::from(p)
    };
    std::fs::write(out, report.to_json()).map_err(|e| HarnessError::Io(format!("{}: {e}", out.display())))?;
    std::fs::write(&text_path, report.summary()).map_err(|e| HarnessError::Io(format!("{}: {e}", text_path.display())))?;
    Ok((out.to_path_buf(), text_path))
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    Report::from_json(&text)
}
