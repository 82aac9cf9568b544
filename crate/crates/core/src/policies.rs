//! Interpretational policies: where (if anywhere) the Heisenberg cut sits,
//! whether friend measurements collapse, and whether statements resting on a
//! hadamarded lab are withdrawn.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::Agent;
use crate::circuit::{FriendMeasurement, WireKind};
use crate::hilbert::{sample_label, Distribution, HilbertError, StateVector, ZERO_PROB};
use crate::protocols::{CompiledOp, Experiment};
use crate::reasoning::StruckEntry;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Cut {
    /// Everything is quantum for everyone.
    None,
    /// One assignment shared by all agents.
    Objective { assignment: BTreeMap<String, WireKind> },
    /// Each agent places the cut for themselves.
    Subjective { assignments: BTreeMap<String, BTreeMap<String, WireKind>> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    pub name: String,
    pub cut: Cut,
    #[serde(default)]
    pub collapse_on_friend_measure: bool,
    #[serde(default)]
    pub hadamard_invalidation: bool,
}

pub const BUILTIN_POLICIES: [&str; 5] = ["unitary", "collapse", "objective-cut", "subjective", "hadamard"];

fn kinds(pairs: &[(&str, WireKind)]) -> BTreeMap<String, WireKind> {
    pairs.iter().map(|(r, k)| (r.to_string(), *k)).collect()
}

impl Policy {
    pub fn new(name: impl Into<String>, cut: Cut) -> Self {
        Self { name: name.into(), cut, collapse_on_friend_measure: false, hadamard_invalidation: false }
    }

    /// Built-in policies. Register names follow the built-in experiments:
    /// `A` and `B` are the friends' memories.
    pub fn builtin(name: &str) -> Option<Self> {
        use WireKind::Classical as C;
        let p = match name {
            "unitary" => Self::new(name, Cut::None),
            "collapse" => Self { collapse_on_friend_measure: true, ..Self::new(name, Cut::None) },
            "objective-cut" => Self::new(name, Cut::Objective { assignment: kinds(&[("A", C), ("B", C)]) }),
            "subjective" => Self::new(
                name,
                Cut::Subjective {
                    assignments: [
                        ("Alice", kinds(&[("A", C)])),
                        ("Bob", kinds(&[("A", C), ("B", C)])),
                        ("Ursula", kinds(&[("B", C)])),
                        ("Wigner", BTreeMap::new()),
                    ]
                    .into_iter()
                    .map(|(a, m)| (a.to_string(), m))
                    .collect(),
                },
            ),
            "hadamard" => Self { hadamard_invalidation: true, ..Self::new(name, Cut::None) },
            _ => return None,
        };
        Some(p)
    }

    pub fn builtins() -> Vec<Self> {
        BUILTIN_POLICIES.iter().map(|n| Self::builtin(n).expect("builtin")).collect()
    }

    /// Classical registers from the point of view of `agent`.
    fn assignment_for(&self, agent: &str) -> Option<&BTreeMap<String, WireKind>> {
        match &self.cut {
            Cut::None => None,
            Cut::Objective { assignment } => Some(assignment),
            Cut::Subjective { assignments } => assignments.get(agent),
        }
    }

    /// Wire kind the policy forces on a friend memory in `agent`'s view.
    pub fn view_override(&self, agent: &str, memory: &str) -> Option<WireKind> {
        if self.collapse_on_friend_measure {
            return Some(WireKind::Classical);
        }
        self.assignment_for(agent).and_then(|a| a.get(memory).copied())
    }

    /// Whether a friend measurement into `memory` is a physical collapse.
    pub fn friend_collapses(&self, memory: &str) -> bool {
        self.collapse_on_friend_measure
            || matches!(&self.cut, Cut::Objective { assignment } if assignment.get(memory) == Some(&WireKind::Classical))
    }

    /// Whether measurements made from outside a lab collapse the state.
    pub fn outside_collapses(&self) -> bool {
        self.collapse_on_friend_measure || matches!(self.cut, Cut::Objective { .. })
    }

    fn cut_name(&self) -> &'static str {
        match self.cut {
            Cut::None => "no",
            Cut::Objective { .. } => "objective",
            Cut::Subjective { .. } => "subjective",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyViolation {
    pub time: u32,
    pub actor: String,
    pub operation: String,
    pub register: String,
    pub reason: String,
}

impl fmt::Display for PolicyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[t={}] {} may not perform {}: {}", self.time, self.actor, self.operation, self.reason)
    }
}

/// An operation is legal unless it acts on a register the actor's cut
/// makes classical in a way that does not preserve that register's basis.
/// A friend writing a definite value into a classical memory is always
/// legal.
pub fn legal(policy: &Policy, experiment: &Experiment, actor: &str, op_id: &str, time: u32) -> Result<(), PolicyViolation> {
    let Some(assignment) = policy.assignment_for(actor) else {
        return Ok(());
    };
    let Some(op) = experiment.op(op_id) else {
        return Ok(());
    };
    let unitary = match op {
        CompiledOp::Friend { .. } => return Ok(()),
        CompiledOp::Unitary { op, .. } => op.clone(),
        CompiledOp::Measure { spec, record, .. } => spec.record_unitary(record).expect("record unitary of a valid measurement"),
    };
    let dims: Vec<usize> = unitary
        .targets()
        .iter()
        .map(|t| experiment.register_dim(t).unwrap_or(2))
        .collect();
    for target in unitary.targets() {
        if assignment.get(target) == Some(&WireKind::Classical) && !unitary.preserves_register_basis(target, &dims) {
            return Err(PolicyViolation {
                time,
                actor: actor.to_string(),
                operation: op_id.to_string(),
                register: target.clone(),
                reason: format!(
                    "{} cut: `{target}` is classical, and {op_id} does not preserve its basis, so it is not a well-defined operation on a classical system",
                    policy.cut_name()
                ),
            });
        }
    }
    Ok(())
}

/// Born-rule branches of a friend measurement already applied to `state`:
/// one per observed value (plus `other` when the memory holds weight
/// elsewhere), each with its probability and projected, renormalized state.
pub fn collapse_branches(state: &StateVector, fm: &FriendMeasurement) -> Result<Vec<(String, f64, StateVector)>, HilbertError> {
    let mem = fm.memory.name();
    let mut out = Vec::new();
    let mut indices = Vec::new();
    for i in 0..fm.outcome_count() {
        let idx = fm.outcome_memory_index(i);
        indices.push(idx);
        let projected = state.project_register(mem, &[idx], false)?;
        let p = projected.norm().powi(2);
        if p >= ZERO_PROB {
            let amps = projected.amplitudes().iter().map(|a| a / p.sqrt()).collect();
            out.push((fm.outcome_value(i).to_string(), p, StateVector::new(projected.registers().to_vec(), amps)?));
        }
    }
    let rest = state.project_register(mem, &indices, true)?;
    let p = rest.norm().powi(2);
    if p >= ZERO_PROB {
        let amps = rest.amplitudes().iter().map(|a| a / p.sqrt()).collect();
        out.push((crate::circuit::OTHER.to_string(), p, StateVector::new(rest.registers().to_vec(), amps)?));
    }
    Ok(out)
}

/// Collapses the friend's lab into one branch when the policy says so;
/// otherwise returns the state unchanged.
pub fn apply_collapse<R: Rng + ?Sized>(
    policy: &Policy,
    state: &StateVector,
    fm: &FriendMeasurement,
    rng: &mut R,
) -> Result<StateVector, HilbertError> {
    if !policy.friend_collapses(fm.memory.name()) {
        return Ok(state.clone());
    }
    let branches = collapse_branches(state, fm)?;
    let dist = Distribution(branches.iter().map(|(l, p, _)| (l.clone(), *p)).collect());
    let pick = sample_label(&dist, rng);
    Ok(branches.into_iter().find(|(l, _, _)| *l == pick).expect("sampled label").2)
}

/// Strikes every entry that depends on an agent whose lab was measured from
/// outside at or before `now`. Only removes entries.
pub fn invalidate_on_hadamarding(
    policy: &Policy,
    hadamarded: &BTreeMap<String, u32>,
    agents: &mut BTreeMap<String, Agent>,
    now: u32,
) -> Vec<StruckEntry> {
    if !policy.hadamard_invalidation {
        return Vec::new();
    }
    let scrambled: Vec<&String> = hadamarded.iter().filter(|(_, t)| **t <= now).map(|(a, _)| a).collect();
    let mut struck = Vec::new();
    for (name, agent) in agents.iter_mut() {
        for entry in agent.invalidate(|e| scrambled.iter().any(|s| e.depends_on.contains(*s))) {
            let because_of = scrambled.iter().filter(|s| entry.depends_on.contains(**s)).map(|s| s.to_string()).collect();
            struck.push(StruckEntry { agent: name.clone(), entry, because_of });
        }
    }
    struck
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prediction {
    Distribution { values: Distribution },
    Disallowed { reason: String },
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prediction::Distribution { values } => {
                let parts: Vec<String> = values.iter().map(|(l, p)| format!("{l}:{p:.4}")).collect();
                write!(f, "{}", parts.join(" "))
            }
            Prediction::Disallowed { .. } => f.write_str("disallowed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub policy: String,
    pub cells: Vec<Prediction>,
}

/// Policy × observable table of predicted distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    pub observables: Vec<String>,
    pub rows: Vec<MatrixRow>,
}

impl PredictionMatrix {
    pub fn cell(&self, policy: &str, observable: &str) -> Option<&Prediction> {
        let col = self.observables.iter().position(|o| o == observable)?;
        self.rows.iter().find(|r| r.policy == policy).map(|r| &r.cells[col])
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<16}", "policy");
        for o in &self.observables {
            out.push_str(&format!(" | {o}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<16}", row.policy));
            for c in &row.cells {
                out.push_str(&format!(" | {c}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Exact predictions of every script under every policy. Observables are
/// `<script>:<variable>` marginals and `<script>:verdict`.
pub fn prediction_matrix(
    scripts: &[crate::protocols::ExperimentScript],
    policies: &[Policy],
) -> Result<PredictionMatrix, crate::protocols::ProtocolError> {
    let mut observables = Vec::new();
    let mut columns: Vec<Vec<Prediction>> = Vec::new();
    for script in scripts {
        let mut per_policy = Vec::new();
        for policy in policies {
            per_policy.push(crate::protocols::exact_analysis(script, policy)?);
        }
        let vars = per_policy[0].variables.clone();
        for var in vars.iter().map(Some).chain([None]) {
            observables.push(format!("{}:{}", script.name, var.map_or("verdict", |v| v.as_str())));
            columns.push(
                per_policy
                    .iter()
                    .map(|a| match var {
                        Some(v) => match a.blocked(v) {
                            Some(reason) => Prediction::Disallowed { reason },
                            None => Prediction::Distribution { values: a.marginal(v) },
                        },
                        None => Prediction::Distribution { values: a.verdicts() },
                    })
                    .collect(),
            );
        }
    }
    let rows = policies
        .iter()
        .enumerate()
        .map(|(i, p)| MatrixRow { policy: p.name.clone(), cells: columns.iter().map(|c| c[i].clone()).collect() })
        .collect();
    Ok(PredictionMatrix { observables, rows })
}
