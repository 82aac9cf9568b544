//! Experiment scripts, their compiled form, exact branch enumeration and
//! seeded execution.
//!
//! A script is plain data (loadable from TOML). Compiling it builds the
//! physical operations and checks it: unique names, strictly increasing
//! step times, lab isolation and consistency of the agents' views.
//!
//! Execution enumerates every outcome branch once, exactly, and then
//! samples paths through that branch tree. Under a collapse policy each
//! measurement projects the state. Otherwise the global state stays unitary
//! and each outcome is drawn conditionally on the most recent earlier
//! outcome whose record is still intact (not disturbed by a later
//! operation), using the joint Born weights of the two records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{memory_label, Agent, AgentError, KnowledgeEntry};
use crate::circuit::{
    build_friend_measurement, build_notebook_write, build_ok_fail, build_undo, check_shared_gates, CircuitError,
    CircuitView, FriendMeasurement, NotebookContent, WireKind, NOTEBOOK_DEFINITIVE, NOTEBOOK_EMPTY, OTHER,
};
use crate::hilbert::{sample_label, Distribution, HilbertError, LinearOp, MeasurementSpec, RegisterSpec, Role, StateVector, ZERO_PROB};
use crate::policies::{collapse_branches, legal, Policy, PolicyViolation};
use crate::reasoning::{
    Contradiction, InferenceEvent, InferenceStep, Reasoner, ReasoningError, ScheduleItem, ScheduledItem, StruckEntry,
};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid script: {0}")]
    InvalidScript(String),
    #[error("lab isolation: {0}")]
    Isolation(String),
    #[error("script parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Hilbert(#[from] HilbertError),
    #[error(transparent)]
    Reasoning(#[from] ReasoningError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

fn invalid(msg: impl Into<String>) -> ProtocolError {
    ProtocolError::InvalidScript(msg.into())
}

/// A real amplitude: a number or an expression such as `sqrt(1/3)`,
/// `-sqrt(2/3)` or `1/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Amplitude {
    Number(f64),
    Expr(String),
}

impl Amplitude {
    pub fn value(&self) -> Result<f64> {
        match self {
            Amplitude::Number(x) => Ok(*x),
            Amplitude::Expr(s) => parse_amplitude(s).ok_or_else(|| invalid(format!("cannot read amplitude `{s}`"))),
        }
    }
}

fn parse_amplitude(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Some(rest) = s.strip_prefix('-') {
        return parse_amplitude(rest).map(|x| -x);
    }
    if let Some(inner) = s.strip_prefix("sqrt(").and_then(|r| r.strip_suffix(')')) {
        return parse_fraction(inner).filter(|x| *x >= 0.0).map(f64::sqrt);
    }
    parse_fraction(s)
}

fn parse_fraction(s: &str) -> Option<f64> {
    match s.split_once('/') {
        Some((n, d)) => {
            let d: f64 = d.trim().parse().ok()?;
            (d != 0.0).then_some(n.trim().parse::<f64>().ok()? / d)
        }
        None => s.trim().parse().ok(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Initial {
    Label(String),
    Amplitudes(Vec<Amplitude>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterDecl {
    pub name: String,
    pub role: Role,
    pub labels: Vec<String>,
    /// Defaults to the first label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Initial>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentDecl {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<String>,
    /// Registers initially inside this agent's lab.
    #[serde(default)]
    pub lab: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateName {
    H,
    X,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisName {
    Computational,
    /// `|+⟩, |−⟩` on a qubit, outcomes `+` and `-`.
    PlusMinus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Operation {
    /// Friend measures `observed` into `memory`, entangling `environment`.
    Friend {
        id: String,
        observed: String,
        memory: String,
        environment: String,
        variable: String,
        ready: String,
        /// Memory label written for each observed basis state.
        outcomes: Vec<String>,
        #[serde(default)]
        env_overlap: f64,
    },
    /// Single-register gate, optionally controlled on one label of another
    /// register.
    Gate {
        id: String,
        target: String,
        gate: GateName,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        control: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        control_label: Option<String>,
    },
    /// ok/fail measurement of the lab of a friend operation.
    OkFail { id: String, friend: String, variable: String },
    /// Measurement of one register in a fixed basis.
    Basis { id: String, register: String, basis: BasisName, variable: String },
    /// Inverse of a friend operation.
    Undo { id: String, friend: String },
    /// Friend writes into a notebook register.
    Notebook { id: String, friend: String, notebook: String, content: NotebookContent },
}

impl Operation {
    pub fn id(&self) -> &str {
        match self {
            Operation::Friend { id, .. }
            | Operation::Gate { id, .. }
            | Operation::OkFail { id, .. }
            | Operation::Basis { id, .. }
            | Operation::Undo { id, .. }
            | Operation::Notebook { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "do", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Apply { op: String },
    /// Moves a register from the actor's lab to another agent's lab.
    Send { register: String, to: String },
    Predict { target: String },
    Simulate { agent: String, given: String },
    Adopt,
    Announce {
        variable: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        to: Option<String>,
    },
    Compare,
}

impl Action {
    fn describe(&self) -> String {
        match self {
            Action::Apply { op } => format!("apply {op}"),
            Action::Send { register, to } => format!("send {register} to {to}"),
            Action::Predict { target } => format!("predict {target}"),
            Action::Simulate { agent, given } => format!("reason as {agent} given {given}"),
            Action::Adopt => "adopt nested statements".into(),
            Action::Announce { variable, to } => match to {
                Some(t) => format!("announce {variable} to {t}"),
                None => format!("announce {variable}"),
            },
            Action::Compare => "compare".into(),
        }
    }

    fn inference(&self) -> Option<InferenceStep> {
        Some(match self {
            Action::Predict { target } => InferenceStep::Predict { target: target.clone() },
            Action::Simulate { agent, given } => InferenceStep::Simulate { agent: agent.clone(), given: given.clone() },
            Action::Adopt => InferenceStep::Adopt,
            Action::Announce { variable, to } => InferenceStep::Announce { variable: variable.clone(), to: to.clone() },
            Action::Compare => InferenceStep::Compare,
            Action::Apply { .. } | Action::Send { .. } => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub time: u32,
    pub actor: String,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentScript {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub registers: Vec<RegisterDecl>,
    pub agents: Vec<AgentDecl>,
    pub operations: Vec<Operation>,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub views: Vec<CircuitView>,
}

pub const BUILTIN_SCRIPTS: [&str; 3] = ["wigner", "deutsch", "fr"];

impl ExperimentScript {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ProtocolError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scripts serialize")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "wigner" => Some(script_wigner()),
            "deutsch" => Some(script_deutsch()),
            "fr" => Some(script_fr()),
            _ => None,
        }
    }

    pub fn compile(&self) -> Result<Experiment> {
        Experiment::compile(self.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitaryKind {
    Gate,
    Undo,
    Notebook,
}

#[derive(Debug, Clone)]
pub enum CompiledOp {
    Friend { fm: FriendMeasurement, unitary: LinearOp, variable: String },
    Unitary { op: LinearOp, kind: UnitaryKind },
    Measure { spec: MeasurementSpec, variable: String, record: RegisterSpec },
}

impl CompiledOp {
    /// The op as a unitary on existing registers (measurements act on their
    /// record register).
    pub fn physical(&self) -> Result<LinearOp> {
        Ok(match self {
            CompiledOp::Friend { unitary, .. } => unitary.clone(),
            CompiledOp::Unitary { op, .. } => op.clone(),
            CompiledOp::Measure { spec, record, .. } => spec.record_unitary(record)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableInfo {
    pub name: String,
    pub op: String,
    pub time: u32,
    pub actor: String,
    pub values: Vec<String>,
}

/// A validated script with its physical operations built.
#[derive(Debug, Clone)]
pub struct Experiment {
    script: ExperimentScript,
    registers: Vec<RegisterSpec>,
    initial: StateVector,
    ops: BTreeMap<String, CompiledOp>,
    variables: Vec<VariableInfo>,
    memories: BTreeMap<String, String>,
}

impl Experiment {
    pub fn compile(script: ExperimentScript) -> Result<Self> {
        let mut registers = Vec::new();
        let mut parts = Vec::new();
        for decl in &script.registers {
            if registers.iter().any(|r: &RegisterSpec| r.name() == decl.name) {
                return Err(invalid(format!("register `{}` declared twice", decl.name)));
            }
            let spec = RegisterSpec::new(decl.name.clone(), decl.role, decl.labels.clone())?;
            let state = match &decl.initial {
                None => StateVector::basis_index(spec.clone(), 0)?,
                Some(Initial::Label(l)) => StateVector::basis(spec.clone(), l)?,
                Some(Initial::Amplitudes(a)) => {
                    let amps = a.iter().map(Amplitude::value).collect::<Result<Vec<_>>>()?;
                    StateVector::from_real(spec.clone(), &amps)?
                }
            };
            registers.push(spec);
            parts.push(state);
        }
        let initial = StateVector::tensor(&parts)?;
        let reg = |name: &str| -> Result<RegisterSpec> {
            registers
                .iter()
                .find(|r| r.name() == name)
                .cloned()
                .ok_or_else(|| invalid(format!("unknown register `{name}`")))
        };

        let mut agent_names = BTreeSet::new();
        let mut memories = BTreeMap::new();
        for a in &script.agents {
            if !agent_names.insert(a.name.clone()) {
                return Err(invalid(format!("agent `{}` declared twice", a.name)));
            }
            if let Some(m) = &a.memory {
                reg(m)?;
                if memories.insert(m.clone(), a.name.clone()).is_some() {
                    return Err(invalid(format!("memory `{m}` belongs to two agents")));
                }
            }
        }

        let mut ops = BTreeMap::new();
        let mut friends: BTreeMap<String, FriendMeasurement> = BTreeMap::new();
        let mut op_variables: BTreeMap<String, (String, Vec<String>)> = BTreeMap::new();
        for op in &script.operations {
            if ops.contains_key(op.id()) {
                return Err(invalid(format!("operation `{}` declared twice", op.id())));
            }
            let friend = |id: &str| friends.get(id).cloned().ok_or_else(|| invalid(format!("`{id}` is not a friend operation")));
            let compiled = match op {
                Operation::Friend { observed, memory, environment, variable, ready, outcomes, env_overlap, .. } => {
                    let fm = FriendMeasurement::new(reg(observed)?, reg(memory)?, reg(environment)?, ready.clone(), outcomes.clone())?
                        .with_env_overlap(*env_overlap)?;
                    let unitary = build_friend_measurement(&fm)?;
                    let values = (0..fm.outcome_count()).map(|i| fm.outcome_value(i).to_string()).collect();
                    op_variables.insert(op.id().to_string(), (variable.clone(), values));
                    friends.insert(op.id().to_string(), fm.clone());
                    CompiledOp::Friend { fm, unitary, variable: variable.clone() }
                }
                Operation::Gate { target, gate, control, control_label, .. } => {
                    let t = reg(target)?;
                    let g = single_gate(*gate, t.dim())?;
                    let op = match (control, control_label) {
                        (None, None) => LinearOp::unitary(vec![target.clone()], g)?,
                        (Some(c), Some(l)) => {
                            let c = reg(c)?;
                            controlled(&c, c.index_of(l)?, target, &g)?
                        }
                        _ => return Err(invalid(format!("gate `{}` needs both control and control_label", op.id()))),
                    };
                    CompiledOp::Unitary { op, kind: UnitaryKind::Gate }
                }
                Operation::OkFail { friend: f, variable, .. } => {
                    let fm = friend(f)?;
                    let lab = fm.lab_registers();
                    let lab: Vec<&str> = lab.iter().map(String::as_str).collect();
                    let spec = build_ok_fail(&lab, &fm)?;
                    measure_op(spec, variable, &mut op_variables, op.id())?
                }
                Operation::Basis { register, basis, variable, .. } => {
                    let r = reg(register)?;
                    let spec = match basis {
                        BasisName::Computational => MeasurementSpec::computational(&r),
                        BasisName::PlusMinus => {
                            if r.dim() != 2 {
                                return Err(invalid(format!("plus_minus basis needs a qubit, `{register}` has dimension {}", r.dim())));
                            }
                            MeasurementSpec::new(
                                vec![StateVector::plus(r.clone())?, StateVector::minus(r.clone())?],
                                vec!["+".into(), "-".into()],
                                None,
                            )?
                        }
                    };
                    measure_op(spec, variable, &mut op_variables, op.id())?
                }
                Operation::Undo { friend: f, .. } => CompiledOp::Unitary { op: build_undo(&friend(f)?)?, kind: UnitaryKind::Undo },
                Operation::Notebook { friend: f, notebook, content, .. } => CompiledOp::Unitary {
                    op: build_notebook_write(&friend(f)?, &reg(notebook)?, *content)?,
                    kind: UnitaryKind::Notebook,
                },
            };
            ops.insert(op.id().to_string(), compiled);
        }

        for op in ops.values() {
            if let CompiledOp::Measure { record, .. } = op {
                if registers.iter().any(|r| r.name() == record.name()) {
                    return Err(invalid(format!("register name `{}` is reserved for a record", record.name())));
                }
            }
        }

        // Steps: times, actors, references, single use of each measurement.
        let mut variables = Vec::new();
        let mut last_time: Option<u32> = None;
        for step in &script.steps {
            if last_time.is_some_and(|t| step.time <= t) {
                return Err(invalid(format!("step times must strictly increase (t={} follows t={})", step.time, last_time.unwrap())));
            }
            last_time = Some(step.time);
            if !agent_names.contains(&step.actor) {
                return Err(invalid(format!("unknown actor `{}` at t={}", step.actor, step.time)));
            }
            for action in &step.actions {
                match action {
                    Action::Apply { op } => {
                        if !ops.contains_key(op) {
                            return Err(invalid(format!("unknown operation `{op}` at t={}", step.time)));
                        }
                        if let Some((var, values)) = op_variables.get(op) {
                            if variables.iter().any(|v: &VariableInfo| v.name == *var) {
                                return Err(invalid(format!("variable `{var}` is measured twice")));
                            }
                            variables.push(VariableInfo {
                                name: var.clone(),
                                op: op.clone(),
                                time: step.time,
                                actor: step.actor.clone(),
                                values: values.clone(),
                            });
                        }
                    }
                    Action::Send { register, to } => {
                        reg(register)?;
                        if !agent_names.contains(to) {
                            return Err(invalid(format!("unknown recipient `{to}`")));
                        }
                    }
                    Action::Simulate { agent, .. } if !agent_names.contains(agent) => {
                        return Err(invalid(format!("unknown agent `{agent}`")));
                    }
                    Action::Announce { to: Some(to), .. } if !agent_names.contains(to) => {
                        return Err(invalid(format!("unknown recipient `{to}`")));
                    }
                    _ => {}
                }
            }
        }
        let known: BTreeSet<&str> = op_variables.values().map(|(v, _)| v.as_str()).collect();
        for step in &script.steps {
            for action in &step.actions {
                let var = match action {
                    Action::Predict { target } => Some(target),
                    Action::Simulate { given, .. } => Some(given),
                    Action::Announce { variable, .. } => Some(variable),
                    _ => None,
                };
                if let Some(v) = var {
                    if !known.contains(v.as_str()) {
                        return Err(invalid(format!("unknown variable `{v}` at t={}", step.time)));
                    }
                }
            }
        }

        let exp = Self { script, registers, initial, ops, variables, memories };
        exp.check_isolation()?;
        exp.check_views()?;
        Ok(exp)
    }

    fn check_isolation(&self) -> Result<()> {
        let mut owner: BTreeMap<String, String> = BTreeMap::new();
        for a in &self.script.agents {
            for r in &a.lab {
                if !self.registers.iter().any(|s| s.name() == r) {
                    return Err(invalid(format!("lab of {} lists unknown register `{r}`", a.name)));
                }
                if let Some(prev) = owner.insert(r.clone(), a.name.clone()) {
                    return Err(ProtocolError::Isolation(format!("`{r}` is in the labs of both {prev} and {}", a.name)));
                }
            }
        }
        for step in &self.script.steps {
            for action in &step.actions {
                match action {
                    Action::Apply { op } => {
                        let targets = self.ops[op].physical()?.targets().to_vec();
                        let labs: BTreeSet<&String> = targets.iter().filter_map(|t| owner.get(t)).collect();
                        if labs.len() > 1 {
                            return Err(ProtocolError::Isolation(format!(
                                "{op} at t={} acts across the labs of {}",
                                step.time,
                                labs.into_iter().cloned().collect::<Vec<_>>().join(" and ")
                            )));
                        }
                    }
                    Action::Send { register, to } => {
                        if owner.get(register) != Some(&step.actor) {
                            return Err(ProtocolError::Isolation(format!(
                                "{} cannot send `{register}` at t={}: it is not in their lab",
                                step.actor, step.time
                            )));
                        }
                        owner.insert(register.clone(), to.clone());
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    fn check_views(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for v in &self.script.views {
            v.validate()?;
            if !self.script.agents.iter().any(|a| a.name == v.agent) {
                return Err(invalid(format!("view for unknown agent `{}`", v.agent)));
            }
            if !seen.insert(v.agent.as_str()) {
                return Err(invalid(format!("two views for {}", v.agent)));
            }
            for g in &v.gates {
                if !self.ops.contains_key(&g.id) {
                    return Err(invalid(format!("view of {} names unknown gate `{}`", v.agent, g.id)));
                }
            }
        }
        let mut all = self.registers.clone();
        for op in self.ops.values() {
            if let CompiledOp::Measure { record, .. } = op {
                all.push(record.clone());
            }
        }
        check_shared_gates(&self.script.views, |id| self.ops.get(id).and_then(|o| o.physical().ok()), &all)?;
        Ok(())
    }

    pub fn script(&self) -> &ExperimentScript {
        &self.script
    }

    pub fn name(&self) -> &str {
        &self.script.name
    }

    pub fn registers(&self) -> &[RegisterSpec] {
        &self.registers
    }

    pub fn register_dim(&self, name: &str) -> Option<usize> {
        self.registers.iter().find(|r| r.name() == name).map(RegisterSpec::dim).or_else(|| {
            self.ops.values().find_map(|o| match o {
                CompiledOp::Measure { record, .. } if record.name() == name => Some(record.dim()),
                _ => None,
            })
        })
    }

    pub fn initial_state(&self) -> &StateVector {
        &self.initial
    }

    pub fn op(&self, id: &str) -> Option<&CompiledOp> {
        self.ops.get(id)
    }

    pub fn ops(&self) -> impl Iterator<Item = (&str, &CompiledOp)> {
        self.ops.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Measured variables in time order.
    pub fn variables(&self) -> &[VariableInfo] {
        &self.variables
    }

    pub fn variable(&self, name: &str) -> Option<&VariableInfo> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn view(&self, agent: &str) -> Option<&CircuitView> {
        self.script.views.iter().find(|v| v.agent == agent)
    }

    /// Global state after every `Apply` up to and including `time`, with no
    /// collapse. Measurements are applied as dilations into their record
    /// registers.
    pub fn unitary_state_at(&self, time: u32) -> Result<StateVector> {
        let mut state = self.initial.clone();
        for step in self.script.steps.iter().filter(|s| s.time <= time) {
            for action in &step.actions {
                let Action::Apply { op } = action else { continue };
                let compiled = self.ops.get(op).ok_or_else(|| invalid(format!("unknown operation `{op}`")))?;
                let linear = match compiled {
                    CompiledOp::Measure { spec, record, .. } => spec.dilation(record.clone())?,
                    other => other.physical()?,
                };
                state = state.apply(&linear)?;
            }
        }
        Ok(state)
    }

    /// Agent whose memory register is `register`.
    pub fn memory_owner(&self, register: &str) -> Option<&str> {
        self.memories.get(register).map(String::as_str)
    }

    fn fresh_agents(&self) -> BTreeMap<String, Agent> {
        self.script
            .agents
            .iter()
            .map(|d| {
                let mut a = Agent::new(d.name.clone());
                a.memory_register = d.memory.clone();
                a.view = self.view(&d.name).cloned();
                (d.name.clone(), a)
            })
            .collect()
    }
}

fn measure_op(
    spec: MeasurementSpec,
    variable: &str,
    op_variables: &mut BTreeMap<String, (String, Vec<String>)>,
    id: &str,
) -> Result<CompiledOp> {
    let record = spec.record_register(&format!("rec:{variable}"))?;
    op_variables.insert(id.to_string(), (variable.to_string(), spec.outcome_labels()));
    Ok(CompiledOp::Measure { spec, variable: variable.to_string(), record })
}

fn single_gate(gate: GateName, dim: usize) -> Result<nalgebra::DMatrix<Complex64>> {
    if dim != 2 {
        return Err(invalid(format!("gates act on qubits, not dimension {dim}")));
    }
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let m = match gate {
        GateName::H => [h, h, h, -h],
        GateName::X => [0.0, 1.0, 1.0, 0.0],
        GateName::Z => [1.0, 0.0, 0.0, -1.0],
    };
    Ok(nalgebra::DMatrix::from_row_slice(2, 2, &m.map(|x| Complex64::new(x, 0.0))))
}

fn controlled(control: &RegisterSpec, on: usize, target: &str, g: &nalgebra::DMatrix<Complex64>) -> Result<LinearOp> {
    let (dc, dt) = (control.dim(), g.nrows());
    let m = nalgebra::DMatrix::from_fn(dc * dt, dc * dt, |r, c| {
        let (cr, tr, cc, tc) = (r / dt, r % dt, c / dt, c % dt);
        if cr != cc {
            Complex64::new(0.0, 0.0)
        } else if cr == on {
            g[(tr, tc)]
        } else if tr == tc {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    Ok(LinearOp::unitary(vec![control.name().to_string(), target.to_string()], m)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Consistent,
    Contradiction,
    Aborted,
}

impl Verdict {
    pub const ALL: [Verdict; 3] = [Verdict::Consistent, Verdict::Contradiction, Verdict::Aborted];

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Consistent => "consistent",
            Verdict::Contradiction => "contradiction",
            Verdict::Aborted => "aborted",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub time: u32,
    pub actor: String,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub statements: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub script: String,
    pub policy: String,
    pub seed: Option<u64>,
    #[serde(default)]
    pub stream: u64,
    pub steps: Vec<StepRecord>,
    /// `(variable, value)` in time order.
    pub outcomes: Vec<(String, String)>,
    pub transcript: Vec<String>,
    pub events: Vec<InferenceEvent>,
    pub knowledge: BTreeMap<String, Vec<KnowledgeEntry>>,
    pub struck: Vec<StruckEntry>,
    pub contradiction: Option<Contradiction>,
    pub violation: Option<PolicyViolation>,
    pub notes: Vec<String>,
    pub verdict: Verdict,
}

impl RunTrace {
    pub fn outcome(&self, variable: &str) -> Option<&str> {
        self.outcomes.iter().find(|(v, _)| v == variable).map(|(_, x)| x.as_str())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&format!("t={} {}: {}", s.time, s.actor, s.action));
            if let Some(o) = &s.outcome {
                out.push_str(&format!(" -> {o}"));
            }
            out.push('\n');
            for st in &s.statements {
                out.push_str(&format!("    {st}\n"));
            }
        }
        if let Some(v) = &self.violation {
            out.push_str(&format!("policy violation: {v}\n"));
        }
        if let Some(c) = &self.contradiction {
            out.push_str(&format!("{}\n", c.render()));
        }
        for s in &self.struck {
            out.push_str(&format!("struck from {}: {}\n", s.agent, s.entry.statement.render()));
        }
        out.push_str(&format!("verdict: {}\n", self.verdict));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub probability: f64,
    pub trace: RunTrace,
}

#[derive(Debug, Clone)]
enum TreeNode {
    Leaf(usize),
    Choice { options: Vec<(String, f64, usize)> },
}

#[derive(Debug, Clone)]
struct Rec {
    register: String,
    indices: Vec<usize>,
    complement: bool,
    intact: bool,
}

#[derive(Debug, Clone)]
struct Path {
    state: StateVector,
    records: Vec<Rec>,
    outcomes: Vec<(String, String)>,
    steps: Vec<StepRecord>,
    schedule: Vec<ScheduledItem>,
    violation: Option<PolicyViolation>,
}

/// One value of a measurement: where its record lives.
struct Outcome {
    value: String,
    indices: Vec<usize>,
    complement: bool,
}

/// Compiled experiment under one policy with its full branch tree.
pub struct Engine {
    experiment: Arc<Experiment>,
    policy: Policy,
    reasoner: Reasoner,
    nodes: Vec<TreeNode>,
    branches: Vec<Branch>,
}

impl Engine {
    pub fn new(script: &ExperimentScript, policy: &Policy) -> Result<Self> {
        let experiment = Arc::new(script.compile()?);
        let reasoner = Reasoner::new(Arc::clone(&experiment), policy.clone());
        let mut engine = Self { experiment, policy: policy.clone(), reasoner, nodes: Vec::new(), branches: Vec::new() };
        let path = Path {
            state: engine.experiment.initial_state().clone(),
            records: Vec::new(),
            outcomes: Vec::new(),
            steps: Vec::new(),
            schedule: Vec::new(),
            violation: None,
        };
        let flat = engine.flat_actions();
        engine.explore(&flat, 0, path, 1.0)?;
        Ok(engine)
    }

    pub fn experiment(&self) -> &Experiment {
        &self.experiment
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn reasoner(&self) -> &Reasoner {
        &self.reasoner
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    fn flat_actions(&self) -> Vec<(u32, String, Action)> {
        self.experiment
            .script
            .steps
            .iter()
            .flat_map(|s| s.actions.iter().map(move |a| (s.time, s.actor.clone(), a.clone())))
            .collect()
    }

    fn explore(&mut self, flat: &[(u32, String, Action)], mut pos: usize, mut path: Path, prob: f64) -> Result<usize> {
        while pos < flat.len() {
            let (time, actor, action) = &flat[pos];
            let mut record = StepRecord { time: *time, actor: actor.clone(), action: action.describe(), outcome: None, statements: Vec::new() };
            match action {
                Action::Apply { op: id } => {
                    if let Err(v) = legal(&self.policy, &self.experiment, actor, id, *time) {
                        record.outcome = Some("policy violation".into());
                        path.steps.push(record);
                        path.violation = Some(v);
                        break;
                    }
                    let op = self.experiment.ops[id].clone();
                    match &op {
                        CompiledOp::Friend { fm, unitary, variable } => {
                            path.state = path.state.apply(unitary)?;
                            self.disturb(&mut path, unitary);
                            let outcomes = friend_outcomes(fm);
                            let options = if self.policy.friend_collapses(fm.memory.name()) {
                                collapse_branches(&path.state, fm)?
                                    .into_iter()
                                    .map(|(v, p, s)| (v, p, Some(s)))
                                    .collect()
                            } else {
                                self.markov(&path, fm.memory.name(), &outcomes)?
                            };
                            path.steps.push(record);
                            return self.branch(flat, pos, path, prob, variable, fm.memory.name(), outcomes, options);
                        }
                        CompiledOp::Measure { spec, variable, record: rec } => {
                            path.state = path.state.apply(&spec.dilation(rec.clone())?)?;
                            let unitary = spec.record_unitary(rec)?;
                            self.disturb(&mut path, &unitary);
                            self.hadamard_events(&mut path, &unitary, *time, pos);
                            let outcomes: Vec<Outcome> = spec
                                .outcome_labels()
                                .into_iter()
                                .enumerate()
                                .map(|(i, value)| Outcome { value, indices: vec![i], complement: false })
                                .collect();
                            let options = if self.policy.outside_collapses() {
                                let mut opts = Vec::new();
                                for o in &outcomes {
                                    let projected = path.state.project_register(rec.name(), &o.indices, false)?;
                                    let p = projected.norm().powi(2);
                                    let post = (p >= ZERO_PROB).then(|| {
                                        let amps = projected.amplitudes().iter().map(|a| a / p.sqrt()).collect();
                                        StateVector::new(projected.registers().to_vec(), amps)
                                    });
                                    opts.push((o.value.clone(), p, post.transpose()?));
                                }
                                opts
                            } else {
                                self.markov(&path, rec.name(), &outcomes)?
                            };
                            path.steps.push(record);
                            return self.branch(flat, pos, path, prob, variable, rec.name(), outcomes, options);
                        }
                        CompiledOp::Unitary { op, .. } => {
                            path.state = path.state.apply(op)?;
                            self.disturb(&mut path, op);
                            self.hadamard_events(&mut path, op, *time, pos);
                        }
                    }
                }
                Action::Send { .. } => {}
                other => {
                    let step = other.inference().expect("inference action");
                    path.schedule.push(ScheduledItem { time: *time, actor: actor.clone(), item: ScheduleItem::Infer(step), action: pos });
                }
            }
            path.steps.push(record);
            pos += 1;
        }
        self.finish(path, prob)
    }

    /// Marks records an operation does not leave intact.
    fn disturb(&self, path: &mut Path, op: &LinearOp) {
        let dims: Vec<usize> = op
            .targets()
            .iter()
            .map(|t| path.state.register(t).map(RegisterSpec::dim).unwrap_or(2))
            .collect();
        for rec in path.records.iter_mut().filter(|r| r.intact) {
            if op.targets().contains(&rec.register) && !op.preserves_register_basis(&rec.register, &dims) {
                rec.intact = false;
            }
        }
    }

    /// Records that an operation scrambled some agent's memory.
    fn hadamard_events(&self, path: &mut Path, op: &LinearOp, time: u32, pos: usize) {
        let dims: Vec<usize> = op
            .targets()
            .iter()
            .map(|t| path.state.register(t).map(RegisterSpec::dim).unwrap_or(2))
            .collect();
        for t in op.targets() {
            if let Some(agent) = self.experiment.memory_owner(t) {
                if !op.preserves_register_basis(t, &dims) {
                    path.schedule.push(ScheduledItem { time, actor: agent.to_string(), item: ScheduleItem::Hadamarded, action: pos });
                }
            }
        }
    }

    /// Outcome probabilities conditional on the latest intact record.
    fn markov(&self, path: &Path, register: &str, outcomes: &[Outcome]) -> Result<Vec<(String, f64, Option<StateVector>)>> {
        let base = match path.records.iter().rev().find(|r| r.intact) {
            Some(r) => path.state.project_register(&r.register, &r.indices, r.complement)?,
            None => path.state.clone(),
        };
        let weight = base.norm().powi(2);
        outcomes
            .iter()
            .map(|o| {
                let p = base.project_register(register, &o.indices, o.complement)?.norm().powi(2) / weight;
                Ok((o.value.clone(), p, None))
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn branch(
        &mut self,
        flat: &[(u32, String, Action)],
        pos: usize,
        path: Path,
        prob: f64,
        variable: &str,
        register: &str,
        outcomes: Vec<Outcome>,
        options: Vec<(String, f64, Option<StateVector>)>,
    ) -> Result<usize> {
        let (time, actor, _) = &flat[pos];
        let node = self.nodes.len();
        self.nodes.push(TreeNode::Choice { options: Vec::new() });
        let mut children = Vec::new();
        for (value, p, post) in options {
            if p < ZERO_PROB {
                continue;
            }
            let o = outcomes.iter().find(|o| o.value == value).expect("outcome of this measurement");
            let mut child = path.clone();
            if let Some(s) = post {
                child.state = s;
            }
            child.records.push(Rec { register: register.to_string(), indices: o.indices.clone(), complement: o.complement, intact: true });
            child.outcomes.push((variable.to_string(), value.clone()));
            child.steps.last_mut().expect("step pushed").outcome = Some(format!("{variable}={value}"));
            child.schedule.push(ScheduledItem {
                time: *time,
                actor: actor.clone(),
                item: ScheduleItem::Observe { variable: variable.to_string(), value: value.clone() },
                action: pos,
            });
            let id = self.explore(flat, pos + 1, child, prob * p)?;
            children.push((value, p, id));
        }
        self.nodes[node] = TreeNode::Choice { options: children };
        Ok(node)
    }

    fn finish(&mut self, mut path: Path, prob: f64) -> Result<usize> {
        let mut agents = self.experiment.fresh_agents();
        let outcome = self.reasoner.run_inference_schedule(&mut agents, &path.schedule)?;
        for e in &outcome.events {
            path.steps[e.action].statements.push(e.statement.render());
        }
        if let Some(c) = &outcome.contradiction {
            if let Some(step) = path.steps.iter_mut().rev().find(|s| s.time == c.time && s.actor == c.agent) {
                step.statements.push(c.render());
            }
        }
        for agent in agents.values_mut() {
            if let Some(m) = &agent.memory_register {
                if let Some((var, val)) = path.outcomes.iter().find(|(v, _)| {
                    self.experiment.variable(v).is_some_and(|i| i.actor == agent.name && matches!(self.experiment.ops[&i.op], CompiledOp::Friend { ref fm, .. } if fm.memory.name() == m))
                }) {
                    agent.memory_label = Some(memory_label(var, val));
                }
            }
        }
        let verdict = if path.violation.is_some() {
            Verdict::Aborted
        } else if outcome.contradiction.is_some() {
            Verdict::Contradiction
        } else {
            Verdict::Consistent
        };
        let trace = RunTrace {
            script: self.experiment.name().to_string(),
            policy: self.policy.name.clone(),
            seed: None,
            stream: 0,
            steps: path.steps,
            outcomes: path.outcomes,
            transcript: outcome.transcript(),
            events: outcome.events,
            knowledge: agents.into_iter().map(|(n, a)| (n, a.knowledge().to_vec())).collect(),
            struck: outcome.struck,
            contradiction: outcome.contradiction,
            violation: path.violation,
            notes: outcome.notes,
            verdict,
        };
        self.branches.push(Branch { probability: prob, trace });
        self.nodes.push(TreeNode::Leaf(self.branches.len() - 1));
        Ok(self.nodes.len() - 1)
    }

    /// Index of the branch reached by sampling each measurement in turn.
    pub fn sample_branch<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let mut node = 0;
        loop {
            match &self.nodes[node] {
                TreeNode::Leaf(b) => return *b,
                TreeNode::Choice { options } => {
                    let dist = Distribution(options.iter().map(|(v, p, _)| (v.clone(), *p)).collect());
                    let pick = sample_label(&dist, rng);
                    node = options.iter().find(|(v, _, _)| *v == pick).expect("sampled option").2;
                }
            }
        }
    }

    /// One run drawing from stream 0 of the generator seeded with `seed`.
    pub fn execute(&self, seed: u64) -> RunTrace {
        self.execute_stream(seed, 0)
    }

    /// One run drawing from stream `stream` of the generator seeded with
    /// `seed` (see [`run_rng`]).
    pub fn execute_stream(&self, seed: u64, stream: u64) -> RunTrace {
        let mut rng = run_rng(seed, stream);
        let mut trace = self.branches[self.sample_branch(&mut rng)].trace.clone();
        trace.seed = Some(seed);
        trace.stream = stream;
        trace
    }

    pub fn analysis(&self) -> ExactAnalysis {
        let values: BTreeMap<String, Vec<String>> = self
            .experiment
            .variables()
            .iter()
            .map(|v| {
                let mut vals = v.values.clone();
                if self.branches.iter().any(|b| b.trace.outcome(&v.name) == Some(OTHER)) && !vals.iter().any(|x| x == OTHER) {
                    vals.push(OTHER.into());
                }
                (v.name.clone(), vals)
            })
            .collect();
        ExactAnalysis {
            script: self.experiment.name().to_string(),
            policy: self.policy.name.clone(),
            variables: self.experiment.variables().iter().map(|v| v.name.clone()).collect(),
            values,
            branches: self
                .branches
                .iter()
                .map(|b| BranchSummary {
                    outcomes: b.trace.outcomes.clone(),
                    probability: b.probability,
                    verdict: b.trace.verdict,
                    transcript: b.trace.transcript.clone(),
                    struck: b.trace.struck.iter().map(|s| format!("{}: {}", s.agent, s.entry.statement.render())).collect(),
                    violation: b.trace.violation.clone(),
                })
                .collect(),
        }
    }
}

fn friend_outcomes(fm: &FriendMeasurement) -> Vec<Outcome> {
    let mut all: Vec<usize> = Vec::new();
    let mut out: Vec<Outcome> = (0..fm.outcome_count())
        .map(|i| {
            let idx = fm.outcome_memory_index(i);
            all.push(idx);
            Outcome { value: fm.outcome_value(i).to_string(), indices: vec![idx], complement: false }
        })
        .collect();
    out.push(Outcome { value: OTHER.into(), indices: all, complement: true });
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSummary {
    pub outcomes: Vec<(String, String)>,
    pub probability: f64,
    pub verdict: Verdict,
    pub transcript: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub struck: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violation: Option<PolicyViolation>,
}

impl BranchSummary {
    pub fn outcome(&self, variable: &str) -> Option<&str> {
        self.outcomes.iter().find(|(v, _)| v == variable).map(|(_, x)| x.as_str())
    }

    fn matches(&self, event: &[(&str, &str)]) -> bool {
        event.iter().all(|(v, x)| self.outcome(v) == Some(*x))
    }
}

/// Every reachable branch with its exact probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactAnalysis {
    pub script: String,
    pub policy: String,
    pub variables: Vec<String>,
    pub values: BTreeMap<String, Vec<String>>,
    pub branches: Vec<BranchSummary>,
}

impl ExactAnalysis {
    /// Probability that every listed variable takes the listed value.
    pub fn probability(&self, event: &[(&str, &str)]) -> f64 {
        self.branches.iter().filter(|b| b.matches(event)).fold(0.0, |acc, b| acc + b.probability)
    }

    pub fn conditional(&self, event: &[(&str, &str)], given: &[(&str, &str)]) -> Option<f64> {
        let g = self.probability(given);
        (g >= ZERO_PROB).then(|| {
            let both: Vec<(&str, &str)> = event.iter().chain(given).copied().collect();
            self.probability(&both) / g
        })
    }

    pub fn marginal(&self, variable: &str) -> Distribution {
        let values = self.values.get(variable).cloned().unwrap_or_default();
        Distribution(values.into_iter().map(|v| {
            let p = self.probability(&[(variable, &v)]);
            (v, p)
        }).collect())
    }

    /// Joint table over `vars`, listing only combinations that occur.
    pub fn joint(&self, vars: &[&str]) -> Vec<(Vec<String>, f64)> {
        let mut table: BTreeMap<Vec<String>, f64> = BTreeMap::new();
        for b in &self.branches {
            let key: Option<Vec<String>> = vars.iter().map(|v| b.outcome(v).map(str::to_string)).collect();
            if let Some(k) = key {
                *table.entry(k).or_default() += b.probability;
            }
        }
        table.into_iter().collect()
    }

    pub fn verdicts(&self) -> Distribution {
        Distribution(
            Verdict::ALL
                .iter()
                .map(|v| (v.to_string(), self.verdict_probability(*v)))
                .collect(),
        )
    }

    pub fn verdict_probability(&self, verdict: Verdict) -> f64 {
        self.branches.iter().filter(|b| b.verdict == verdict).fold(0.0, |acc, b| acc + b.probability)
    }

    /// Reason a variable is never measured, when a policy violation stopped
    /// some branch before it.
    pub fn blocked(&self, variable: &str) -> Option<String> {
        self.branches
            .iter()
            .find(|b| b.probability >= ZERO_PROB && b.outcome(variable).is_none() && b.violation.is_some())
            .and_then(|b| b.violation.as_ref().map(ToString::to_string))
    }

    /// Every statement line reachable in some branch, with the total
    /// probability of the branches that produce it.
    pub fn statement_table(&self) -> Vec<(String, f64)> {
        let mut table: BTreeMap<String, f64> = BTreeMap::new();
        for b in &self.branches {
            let lines: BTreeSet<&String> = b.transcript.iter().collect();
            for l in lines {
                *table.entry(l.clone()).or_default() += b.probability;
            }
        }
        table.into_iter().collect()
    }
}

/// Identifier of the generator behind [`run_rng`], written into reports.
pub const RNG_ALGORITHM: &str = "chacha20 (rand_chacha 0.9): seed_from_u64(seed), set_stream(run index)";

/// Generator for run `stream` of a seeded batch. ChaCha20 is counter based,
/// so distinct streams under one key are independent and any run can be
/// regenerated on its own.
pub fn run_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs the script once under `policy` with an RNG seeded from `seed`.
pub fn execute(script: &ExperimentScript, policy: &Policy, seed: u64) -> Result<RunTrace> {
    Ok(Engine::new(script, policy)?.execute(seed))
}

pub fn exact_analysis(script: &ExperimentScript, policy: &Policy) -> Result<ExactAnalysis> {
    Ok(Engine::new(script, policy)?.analysis())
}

fn register(name: &str, role: Role, labels: &[&str], initial: Option<Initial>) -> RegisterDecl {
    RegisterDecl { name: name.into(), role, labels: labels.iter().map(|s| s.to_string()).collect(), initial }
}

const READY: &str = "I am ready.";

fn memory(name: &str, variable: &str) -> RegisterDecl {
    let labels = [READY.to_string(), memory_label(variable, "0"), memory_label(variable, "1")];
    RegisterDecl { name: name.into(), role: Role::Memory, labels: labels.to_vec(), initial: None }
}

fn friend_op(id: &str, observed: &str, mem: &str, env: &str, variable: &str) -> Operation {
    Operation::Friend {
        id: id.into(),
        observed: observed.into(),
        memory: mem.into(),
        environment: env.into(),
        variable: variable.into(),
        ready: READY.into(),
        outcomes: vec![memory_label(variable, "0"), memory_label(variable, "1")],
        env_overlap: 0.0,
    }
}

fn agent(name: &str, memory: Option<&str>, lab: &[&str]) -> AgentDecl {
    AgentDecl { name: name.into(), memory: memory.map(Into::into), lab: lab.iter().map(|s| s.to_string()).collect() }
}

fn step(time: u32, actor: &str, actions: Vec<Action>) -> Step {
    Step { time, actor: actor.into(), actions }
}

fn apply(op: &str) -> Action {
    Action::Apply { op: op.into() }
}

fn amps(a: &[&str]) -> Option<Initial> {
    Some(Initial::Amplitudes(a.iter().map(|s| Amplitude::Expr(s.to_string())).collect()))
}

/// Alice measures a qubit prepared in `|+⟩`; Wigner treats her lab as a
/// quantum system.
pub fn script_wigner() -> ExperimentScript {
    use WireKind::{Classical as C, Quantum as Q};
    ExperimentScript {
        name: "wigner".into(),
        description: "Alice measures R in |+>; Wigner describes her lab unitarily.".into(),
        registers: vec![
            register("R", Role::System, &["0", "1"], amps(&["sqrt(1/2)", "sqrt(1/2)"])),
            memory("A", "a"),
            register("Ā", Role::Environment, &["0", "1"], None),
        ],
        agents: vec![agent("Alice", Some("A"), &["R", "A", "Ā"]), agent("Wigner", None, &[])],
        operations: vec![friend_op("F_A", "R", "A", "Ā", "a")],
        steps: vec![step(1, "Alice", vec![apply("F_A")])],
        views: vec![
            CircuitView::new("Alice").wire("R", Q).wire("A", C).gate("F_A", &["R", "A"], false),
            CircuitView::new("Wigner").wire("R", Q).wire("A", Q).wire("Ā", Q).gate("F_A", &["R", "A", "Ā"], true),
        ],
    }
}

/// Wigner's friend with a notebook: Alice writes that she saw a definite
/// outcome, hands the notebook out, and Wigner undoes her measurement and
/// tests R against `|+⟩`.
pub fn script_deutsch() -> ExperimentScript {
    use WireKind::{Classical as C, Quantum as Q};
    let mut s = script_wigner();
    s.name = "deutsch".into();
    s.description = "Notebook variant: Alice records that she saw an outcome, Wigner undoes her measurement and checks R against |+>.".into();
    s.registers.push(register("N", Role::Notebook, &[NOTEBOOK_EMPTY, NOTEBOOK_DEFINITIVE], None));
    s.agents[0].lab.push("N".into());
    s.operations.extend([
        Operation::Notebook { id: "NB".into(), friend: "F_A".into(), notebook: "N".into(), content: NotebookContent::Definitive },
        Operation::Undo { id: "UNDO".into(), friend: "F_A".into() },
        Operation::Basis { id: "M_W".into(), register: "R".into(), basis: BasisName::PlusMinus, variable: "w".into() },
    ]);
    s.steps = vec![
        step(1, "Alice", vec![apply("F_A"), apply("NB")]),
        step(2, "Alice", vec![Action::Send { register: "N".into(), to: "Wigner".into() }]),
        step(3, "Wigner", vec![apply("UNDO")]),
        step(4, "Wigner", vec![apply("M_W")]),
    ];
    s.views = vec![
        CircuitView::new("Alice").wire("R", Q).wire("A", C).wire("N", C).gate("F_A", &["R", "A"], false).gate("NB", &["A", "N"], true),
        CircuitView::new("Wigner")
            .wire("R", Q)
            .wire("A", Q)
            .wire("Ā", Q)
            .wire("N", Q)
            .gate("F_A", &["R", "A", "Ā"], true)
            .gate("NB", &["A", "N"], true)
            .gate("UNDO", &["R", "A", "Ā"], true)
            .gate("M_W", &["R"], false),
    ];
    s
}

/// The four-agent protocol: Alice measures R, prepares S for Bob, Ursula
/// and Wigner measure the two labs in the ok/fail basis, and each agent
/// reasons about w.
pub fn script_fr() -> ExperimentScript {
    use WireKind::{Classical as C, Quantum as Q};
    let predict = |t: &str| Action::Predict { target: t.into() };
    let simulate = |a: &str, g: &str| Action::Simulate { agent: a.into(), given: g.into() };
    ExperimentScript {
        name: "fr".into(),
        description: "Four agents: Alice and Bob inside labs, Ursula and Wigner outside.".into(),
        registers: vec![
            register("R", Role::System, &["0", "1"], amps(&["sqrt(1/3)", "sqrt(2/3)"])),
            memory("A", "a"),
            register("Ā", Role::Environment, &["0", "1"], None),
            register("S", Role::System, &["0", "1"], None),
            memory("B", "b"),
            register("B̄", Role::Environment, &["0", "1"], None),
        ],
        agents: vec![
            agent("Alice", Some("A"), &["R", "A", "Ā", "S"]),
            agent("Bob", Some("B"), &["B", "B̄"]),
            agent("Ursula", None, &[]),
            agent("Wigner", None, &[]),
        ],
        operations: vec![
            friend_op("F_A", "R", "A", "Ā", "a"),
            Operation::Gate {
                id: "P_S".into(),
                target: "S".into(),
                gate: GateName::H,
                control: Some("A".into()),
                control_label: Some(memory_label("a", "1")),
            },
            friend_op("F_B", "S", "B", "B̄", "b"),
            Operation::OkFail { id: "M_U".into(), friend: "F_A".into(), variable: "u".into() },
            Operation::OkFail { id: "M_W".into(), friend: "F_B".into(), variable: "w".into() },
        ],
        steps: vec![
            step(1, "Alice", vec![apply("F_A"), apply("P_S"), Action::Send { register: "S".into(), to: "Bob".into() }, predict("w")]),
            step(2, "Bob", vec![apply("F_B"), predict("a"), simulate("Alice", "a"), Action::Adopt]),
            step(
                3,
                "Ursula",
                vec![
                    apply("M_U"),
                    predict("b"),
                    simulate("Bob", "b"),
                    Action::Adopt,
                    Action::Announce { variable: "w".into(), to: Some("Wigner".into()) },
                ],
            ),
            step(4, "Wigner", vec![Action::Adopt, apply("M_W")]),
            step(5, "Wigner", vec![Action::Compare]),
        ],
        views: vec![
            CircuitView::new("Alice")
                .wire("R", Q)
                .wire("A", C)
                .wire("S", Q)
                .wire("B", Q)
                .wire("B̄", Q)
                .gate("F_A", &["R", "A"], false)
                .gate("P_S", &["A", "S"], true)
                .gate("F_B", &["S", "B", "B̄"], true)
                .gate("M_W", &["S", "B", "B̄"], false),
            CircuitView::new("Bob")
                .wire("R", Q)
                .wire("A", C)
                .wire("S", Q)
                .wire("B", C)
                .gate("F_A", &["R", "A"], false)
                .gate("P_S", &["A", "S"], true)
                .gate("F_B", &["S", "B"], false),
            CircuitView::new("Ursula")
                .wire("R", Q)
                .wire("A", Q)
                .wire("Ā", Q)
                .wire("S", Q)
                .wire("B", C)
                .gate("F_A", &["R", "A", "Ā"], true)
                .gate("P_S", &["A", "S"], true)
                .gate("F_B", &["S", "B"], false)
                .gate("M_U", &["R", "A", "Ā"], false),
            CircuitView::new("Wigner")
                .wire("R", Q)
                .wire("A", Q)
                .wire("Ā", Q)
                .wire("S", Q)
                .wire("B", Q)
                .wire("B̄", Q)
                .gate("F_A", &["R", "A", "Ā"], true)
                .gate("P_S", &["A", "S"], true)
                .gate("F_B", &["S", "B", "B̄"], true)
                .gate("M_U", &["R", "A", "Ā"], false)
                .gate("M_W", &["S", "B", "B̄"], false),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn amplitude_expressions() {
        assert!(close(parse_amplitude("sqrt(1/3)").unwrap(), (1.0f64 / 3.0).sqrt()));
        assert!(close(parse_amplitude("-1/2").unwrap(), -0.5));
        assert!(close(parse_amplitude("0.25").unwrap(), 0.25));
        assert!(parse_amplitude("sqrt(-1)").is_none());
        assert!(parse_amplitude("1/0").is_none());
    }

    #[test]
    fn builtins_compile() {
        for name in BUILTIN_SCRIPTS {
            ExperimentScript::builtin(name).unwrap().compile().unwrap();
        }
    }

    #[test]
    fn scripts_round_trip_through_toml() {
        for name in BUILTIN_SCRIPTS {
            let s = ExperimentScript::builtin(name).unwrap();
            assert_eq!(ExperimentScript::from_toml(&s.to_toml()).unwrap(), s);
        }
    }

    #[test]
    fn non_increasing_times_rejected() {
        let mut s = script_fr();
        s.steps[2].time = 2;
        assert!(matches!(s.compile(), Err(ProtocolError::InvalidScript(_))));
    }

    #[test]
    fn cross_lab_operation_rejected() {
        let mut s = script_fr();
        // Bob measures before S arrives: F_B touches Alice's S and Bob's B.
        s.steps[0].actions.retain(|a| !matches!(a, Action::Send { .. }));
        assert!(matches!(s.compile(), Err(ProtocolError::Isolation(_))));
    }

    #[test]
    fn sending_a_foreign_register_rejected() {
        let mut s = script_fr();
        s.steps[1].actions.push(Action::Send { register: "A".into(), to: "Wigner".into() });
        assert!(matches!(s.compile(), Err(ProtocolError::Isolation(_))));
    }

    #[test]
    fn fr_joint_outcomes() {
        let a = exact_analysis(&script_fr(), &Policy::builtin("unitary").unwrap()).unwrap();
        assert!(close(a.probability(&[("u", "ok"), ("w", "ok")]), 1.0 / 12.0));
        assert!(close(a.probability(&[("u", "ok"), ("w", "fail")]), 1.0 / 12.0));
        assert!(close(a.probability(&[("u", "fail"), ("w", "ok")]), 1.0 / 12.0));
        assert!(close(a.probability(&[("u", "fail"), ("w", "fail")]), 3.0 / 4.0));
        assert!(close(a.marginal("a").get("1"), 2.0 / 3.0));
        assert!(close(a.verdict_probability(Verdict::Contradiction), 1.0 / 12.0));
    }
}
