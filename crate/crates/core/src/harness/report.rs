use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::policies::{Policy, PredictionMatrix};
use crate::protocols::{ExactAnalysis, ExperimentScript, VariableInfo, Verdict};

pub const SCHEMA_VERSION: &str = "friendsim-report/1";

/// Value `(unmeasured)` counts runs that stopped before a variable was
/// measured.
pub const UNMEASURED: &str = "(unmeasured)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frequency {
    pub value: String,
    pub count: u64,
    pub frequency: f64,
    pub std_error: f64,
}

impl Frequency {
    pub fn new(value: impl Into<String>, count: u64, total: u64) -> Self {
        let p = if total == 0 { 0.0 } else { count as f64 / total as f64 };
        let se = if total == 0 { 0.0 } else { (p * (1.0 - p) / total as f64).sqrt() };
        Self { value: value.into(), count, frequency: p, std_error: se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub runs: u64,
    pub marginals: BTreeMap<String, Vec<Frequency>>,
    pub joint: Vec<Frequency>,
    pub verdicts: Vec<Frequency>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Empirical {
    #[serde(flatten)]
    pub all: Tally,
    pub contradiction_rate: Frequency,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub postselected: Option<PostSelected>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostSelected {
    pub predicate: Vec<(String, String)>,
    #[serde(flatten)]
    pub tally: Tally,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub index: u64,
    /// `var=value` pairs in time order, space separated.
    pub outcomes: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub index: u64,
    pub lines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationLog {
    pub message: String,
    pub runs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: String,
    pub rng_algorithm: String,
    pub build: String,
    pub config: RunConfig,
    /// SHA-256 of the config and script, checked on replay.
    pub digest: String,
    pub script: ExperimentScript,
    pub policy: Policy,
    pub variables: Vec<VariableInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<ExactAnalysis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empirical: Option<Empirical>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<PredictionMatrix>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<RunSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transcripts: Vec<Transcript>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<ViolationLog>,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, super::HarnessError> {
        serde_json::from_str(text).map_err(|e| super::HarnessError::Report(e.to_string()))
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} ({})", self.schema_version, self.build);
        let _ = writeln!(
            out,
            "experiment {} | policy {} | mode {:?} | runs {} | seed {}",
            self.script.name, self.policy.name, self.config.mode, self.config.runs, self.config.seed
        );
        let _ = writeln!(out, "rng: {}", self.rng_algorithm);
        if let Some(exact) = &self.exact {
            let _ = writeln!(out, "\nexact branches:");
            for b in &exact.branches {
                let outs: Vec<String> = b.outcomes.iter().map(|(v, x)| format!("{v}={x}")).collect();
                let _ = writeln!(out, "  {:<28} {:>12.10}  {}", outs.join(" "), b.probability, b.verdict);
            }
            for v in &exact.variables {
                let parts: Vec<String> = exact.marginal(v).iter().map(|(l, p)| format!("{l}:{p:.10}")).collect();
                let _ = writeln!(out, "  P({v}) {}", parts.join(" "));
            }
            let parts: Vec<String> = exact.verdicts().iter().map(|(l, p)| format!("{l}:{p:.10}")).collect();
            let _ = writeln!(out, "  verdicts {}", parts.join(" "));
        }
        if let Some(e) = &self.empirical {
            let _ = writeln!(out, "\nsampled ({} runs):", e.all.runs);
            write_tally(&mut out, &e.all);
            let c = &e.contradiction_rate;
            let _ = writeln!(out, "  contradiction rate {:.6} ± {:.6} ({} runs)", c.frequency, c.std_error, c.count);
            if let Some(ps) = &e.postselected {
                let pred: Vec<String> = ps.predicate.iter().map(|(v, x)| format!("{v}={x}")).collect();
                let _ = writeln!(out, "\npost-selected on {} ({} runs):", pred.join(","), ps.tally.runs);
                write_tally(&mut out, &ps.tally);
            }
        }
        if let Some(m) = &self.matrix {
            let _ = writeln!(out, "\nprediction matrix:");
            out.push_str(&m.render());
        }
        for t in &self.transcripts {
            let _ = writeln!(out, "\nrun {}:", t.index);
            for l in &t.lines {
                let _ = writeln!(out, "  {l}");
            }
        }
        if !self.violations.is_empty() {
            let _ = writeln!(out, "\npolicy violations:");
            for v in &self.violations {
                let _ = writeln!(out, "  {} run(s): {}", v.runs, v.message);
            }
        }
        out
    }
}

fn write_tally(out: &mut String, t: &Tally) {
    for (var, freqs) in &t.marginals {
        let parts: Vec<String> = freqs.iter().map(|f| format!("{}:{:.6}±{:.6}", f.value, f.frequency, f.std_error)).collect();
        let _ = writeln!(out, "  {var}: {}", parts.join(" "));
    }
    let parts: Vec<String> = t.verdicts.iter().map(|f| format!("{}:{}", f.value, f.count)).collect();
    let _ = writeln!(out, "  verdicts: {}", parts.join(" "));
}
