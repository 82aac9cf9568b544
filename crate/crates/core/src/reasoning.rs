//! Rules Q, C and S as executable inference over agent knowledge bases.
//!
//! Rule Q simulates an agent's own view circuit. Registers the agent treats
//! as classical get a dilated copy into a record register; outside
//! measurements are dilated into record registers as well. Conditioning is
//! a projection of the records followed by renormalization, so the result
//! is the ordinary Born-rule conditional within that view.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{announce, receive_announcement, Agent, AgentError, Atom, Body, KnowledgeEntry, Provenance, Recipient, Statement};
use crate::circuit::{CircuitError, CircuitView, WireKind, OTHER};
use crate::hilbert::{Distribution, HilbertError, MeasurementSpec, StateVector, ZERO_PROB};
use crate::policies::Policy;
use crate::protocols::{CompiledOp, Experiment};

/// A conditional probability at least this large counts as certainty.
pub const CERTAINTY_THRESHOLD: f64 = 1.0 - 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReasoningError {
    #[error("conditioning on {0} has probability zero in this view")]
    InconsistentConditioning(String),
    #[error("view error: {0}")]
    View(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Hilbert(#[from] HilbertError),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
}

pub type Result<T> = std::result::Result<T, ReasoningError>;

/// "Given what I hold, what will `target` be?" asked within `view`.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleQQuery {
    pub agent: String,
    /// Time at which the agent draws the conclusion.
    pub time: u32,
    pub conditioning: Vec<Atom>,
    pub target: String,
    pub view: CircuitView,
}

/// Two atoms on the same variable and time with different values, both
/// held by one agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contradiction {
    pub agent: String,
    pub time: u32,
    pub atoms: (Atom, Atom),
}

impl Contradiction {
    pub fn render(&self) -> String {
        format!(
            "[t={}] {}: \"I am certain that {}={} and I am certain that {}={}.\"",
            self.time, self.agent, self.atoms.0.variable, self.atoms.0.value, self.atoms.1.variable, self.atoms.1.value
        )
    }
}

/// One step of an agent's reasoning program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum InferenceStep {
    /// Rule Q on the agent's own observations.
    Predict { target: String },
    /// Reason as `agent` would, given the value of `given` (that agent's
    /// observation) this agent is certain of.
    Simulate { agent: String, given: String },
    /// Rule C to a fixpoint.
    Adopt,
    /// Publish the agent's certain value of `variable`.
    Announce {
        variable: String,
        #[serde(default)]
        to: Option<String>,
    },
    /// Rule S check; the verdict of the run.
    Compare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleItem {
    /// Rule S: the actor's measurement outcome.
    Observe { variable: String, value: String },
    Infer(InferenceStep),
    /// The actor's lab was measured from outside (memory scrambled).
    Hadamarded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledItem {
    pub time: u32,
    pub actor: String,
    pub item: ScheduleItem,
    /// Index of the protocol action this item came from.
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceEvent {
    pub action: usize,
    pub agent: String,
    pub statement: Statement,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StruckEntry {
    pub agent: String,
    pub entry: KnowledgeEntry,
    /// Agents whose lab was measured from outside before the entry was used.
    pub because_of: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutcome {
    pub events: Vec<InferenceEvent>,
    pub contradiction: Option<Contradiction>,
    pub struck: Vec<StruckEntry>,
    pub notes: Vec<String>,
}

impl InferenceOutcome {
    pub fn transcript(&self) -> Vec<String> {
        let mut lines: Vec<String> = self.events.iter().map(|e| e.statement.render()).collect();
        if let Some(c) = &self.contradiction {
            lines.push(c.render());
        }
        lines
    }
}

/// Simulated view: final state plus the record register of each variable.
#[derive(Debug)]
struct ViewState {
    state: StateVector,
    records: BTreeMap<String, (String, Vec<String>)>,
}

/// Runs rules Q/C/S for one experiment under one policy.
pub struct Reasoner {
    experiment: Arc<Experiment>,
    policy: Policy,
    views: Mutex<HashMap<String, Arc<ViewState>>>,
}

impl Reasoner {
    pub fn new(experiment: Arc<Experiment>, policy: Policy) -> Self {
        Self { experiment, policy, views: Mutex::new(HashMap::new()) }
    }

    pub fn experiment(&self) -> &Experiment {
        &self.experiment
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    fn classical_for(&self, agent: &str, view: &CircuitView, register: &str) -> bool {
        match self.policy.view_override(agent, register) {
            Some(kind) => kind == WireKind::Classical,
            None => view.wire_kind(register) == Some(WireKind::Classical),
        }
    }

    fn view_state(&self, agent: &str, view: &CircuitView) -> Result<Arc<ViewState>> {
        let key = format!("{agent}\u{1f}{}", serde_json::to_string(view).expect("view serializes"));
        if let Some(v) = self.views.lock().expect("view cache").get(&key) {
            return Ok(Arc::clone(v));
        }
        let exp = &self.experiment;
        let mut state = exp.initial_state().clone();
        let mut records = BTreeMap::new();
        for gate in &view.gates {
            let op = exp
                .op(&gate.id)
                .ok_or_else(|| ReasoningError::View(format!("view of {agent} names unknown gate `{}`", gate.id)))?;
            match op {
                CompiledOp::Friend { fm, unitary, variable } => {
                    state = state.apply(unitary)?;
                    if self.classical_for(agent, view, fm.memory.name()) {
                        let values: Vec<String> = (0..fm.outcome_count()).map(|i| fm.outcome_value(i).to_string()).collect();
                        let basis = (0..fm.outcome_count())
                            .map(|i| StateVector::basis_index(fm.memory.clone(), fm.outcome_memory_index(i)))
                            .collect::<std::result::Result<Vec<_>, _>>()?;
                        let copy = MeasurementSpec::new(basis, values, Some(OTHER.into()))?;
                        let reg_name = format!("copy:{variable}");
                        let reg = copy.record_register(&reg_name)?;
                        state = state.apply(&copy.dilation(reg)?)?;
                        records.insert(variable.clone(), (reg_name, copy.outcome_labels()));
                    }
                }
                CompiledOp::Unitary { op, .. } => state = state.apply(op)?,
                CompiledOp::Measure { spec, variable, record } => {
                    state = state.apply(&spec.dilation(record.clone())?)?;
                    records.insert(variable.clone(), (record.name().to_string(), spec.outcome_labels()));
                }
            }
        }
        let vs = Arc::new(ViewState { state, records });
        self.views.lock().expect("view cache").insert(key, Arc::clone(&vs));
        Ok(vs)
    }

    /// Conditional distribution of the target given the conditioning atoms.
    pub fn conditional_distribution(&self, q: &RuleQQuery) -> Result<Distribution> {
        let vs = self.view_state(&q.agent, &q.view)?;
        let mut state = vs.state.clone();
        for atom in &q.conditioning {
            let (reg, values) = vs.records.get(&atom.variable).ok_or_else(|| {
                ReasoningError::View(format!("{} has no record of `{}` in their view", q.agent, atom.variable))
            })?;
            let info = self.experiment.variable(&atom.variable).ok_or_else(|| {
                ReasoningError::View(format!("unknown variable `{}`", atom.variable))
            })?;
            if info.time != atom.time {
                return Err(ReasoningError::View(format!(
                    "`{}` is measured at t={}, not t={}",
                    atom.variable, info.time, atom.time
                )));
            }
            let idx = values.iter().position(|v| *v == atom.value).ok_or_else(|| {
                ReasoningError::View(format!("`{}` has no value `{}`", atom.variable, atom.value))
            })?;
            state = state.project_register(reg, &[idx], false)?;
        }
        let weight = state.norm().powi(2);
        if weight < ZERO_PROB {
            let atoms: Vec<String> = q.conditioning.iter().map(ToString::to_string).collect();
            return Err(ReasoningError::InconsistentConditioning(atoms.join(", ")));
        }
        let (reg, values) = vs
            .records
            .get(&q.target)
            .ok_or_else(|| ReasoningError::View(format!("`{}` is not a measurement in the view of {}", q.target, q.agent)))?;
        let probs = state.register_distribution(reg)?;
        Ok(Distribution(values.iter().cloned().zip(probs.into_iter().map(|p| p / weight)).collect()))
    }

    /// Rule Q: a statement iff some value of the target has conditional
    /// probability one (within [`CERTAINTY_THRESHOLD`]).
    pub fn rule_q(&self, q: &RuleQQuery) -> Result<Option<Statement>> {
        let dist = self.conditional_distribution(q)?;
        let time = self
            .experiment
            .variable(&q.target)
            .map(|v| v.time)
            .ok_or_else(|| ReasoningError::View(format!("unknown variable `{}`", q.target)))?;
        let certain = dist
            .iter()
            .find(|(value, p)| *value != OTHER && *p >= CERTAINTY_THRESHOLD)
            .map(|(value, _)| Statement::atom(q.agent.clone(), q.time, Atom::new(q.target.clone(), value, time)));
        Ok(certain)
    }

    fn view_of(&self, agent: &str) -> Result<CircuitView> {
        self.experiment
            .view(agent)
            .cloned()
            .ok_or_else(|| ReasoningError::View(format!("{agent} has no circuit view")))
    }

    /// Executes the inference schedule of one run. `agents` must contain
    /// every actor named in the schedule.
    pub fn run_inference_schedule(
        &self,
        agents: &mut BTreeMap<String, Agent>,
        schedule: &[ScheduledItem],
    ) -> Result<InferenceOutcome> {
        let mut out = InferenceOutcome::default();
        let mut hadamarded: BTreeMap<String, u32> = BTreeMap::new();
        for item in schedule {
            match &item.item {
                ScheduleItem::Observe { variable, value } => {
                    let agent = agent_mut(agents, &item.actor)?;
                    let statement = Statement::atom(item.actor.clone(), item.time, Atom::new(variable.clone(), value.clone(), item.time));
                    if agent.learn(statement.clone(), Provenance::Observation, BTreeSet::from([item.actor.clone()]))? {
                        agent.memory_label = Some(crate::agents::memory_label(variable, value));
                        out.events.push(InferenceEvent {
                            action: item.action,
                            agent: item.actor.clone(),
                            statement,
                            provenance: Provenance::Observation,
                        });
                    }
                }
                ScheduleItem::Hadamarded => {
                    hadamarded.entry(item.actor.clone()).or_insert(item.time);
                }
                ScheduleItem::Infer(step) => {
                    self.infer(agents, item, step, schedule, &hadamarded, &mut out)?;
                }
            }
        }
        Ok(out)
    }

    fn infer(
        &self,
        agents: &mut BTreeMap<String, Agent>,
        item: &ScheduledItem,
        step: &InferenceStep,
        schedule: &[ScheduledItem],
        hadamarded: &BTreeMap<String, u32>,
        out: &mut InferenceOutcome,
    ) -> Result<()> {
        let actor = item.actor.as_str();
        match step {
            InferenceStep::Predict { .. } | InferenceStep::Simulate { .. } | InferenceStep::Adopt => {
                let agent = agent_mut(agents, actor)?;
                let mut learned = Vec::new();
                self.apply_program_step(agent, step, item.time, schedule, 0, &mut learned, &mut out.notes)?;
                out.events.extend(learned.into_iter().map(|(statement, provenance)| InferenceEvent {
                    action: item.action,
                    agent: actor.to_string(),
                    statement,
                    provenance,
                }));
            }
            InferenceStep::Announce { variable, to } => {
                let sender = agent_ref(agents, actor)?.clone();
                let Some(atom) = sender.value_of(variable).cloned() else {
                    out.notes.push(format!("[t={}] {actor} holds no value of {variable} to announce", item.time));
                    return Ok(());
                };
                let recipient = to.clone().map_or(Recipient::Broadcast, Recipient::Agent);
                let ann = announce(&sender, &Body::Atom(atom), recipient, item.time)?;
                let receivers: Vec<String> = match to {
                    Some(n) => vec![n.clone()],
                    None => agents.keys().filter(|n| *n != actor).cloned().collect(),
                };
                for name in receivers {
                    let receiver = agent_mut(agents, &name)?;
                    if receive_announcement(receiver, &sender, &ann)? {
                        let entry = receiver.knowledge().last().expect("just learned").clone();
                        out.events.push(InferenceEvent {
                            action: item.action,
                            agent: name.clone(),
                            statement: entry.statement,
                            provenance: entry.provenance,
                        });
                    }
                }
            }
            InferenceStep::Compare => {
                if self.policy.hadamard_invalidation {
                    out.struck.extend(crate::policies::invalidate_on_hadamarding(&self.policy, hadamarded, agents, item.time));
                }
                if out.contradiction.is_none() {
                    if let Some(mut c) = rule_s_check(agent_ref(agents, actor)?) {
                        c.time = item.time;
                        out.contradiction = Some(c);
                    }
                }
            }
        }
        Ok(())
    }

    /// Predict / Simulate / Adopt on one agent. `learned` collects new
    /// statements in order.
    #[allow(clippy::too_many_arguments)]
    fn apply_program_step(
        &self,
        agent: &mut Agent,
        step: &InferenceStep,
        time: u32,
        schedule: &[ScheduledItem],
        depth: usize,
        learned: &mut Vec<(Statement, Provenance)>,
        notes: &mut Vec<String>,
    ) -> Result<()> {
        match step {
            InferenceStep::Predict { target } => {
                let view = self.view_of(&agent.name)?;
                let records = self.view_state(&agent.name, &view)?;
                let conditioning: Vec<Atom> = agent
                    .observed_atoms()
                    .filter(|a| records.records.contains_key(&a.variable))
                    .cloned()
                    .collect();
                if conditioning.is_empty() {
                    notes.push(format!("[t={time}] {} has no observation to condition on", agent.name));
                    return Ok(());
                }
                let q = RuleQQuery { agent: agent.name.clone(), time, conditioning, target: target.clone(), view };
                match self.rule_q(&q) {
                    Ok(Some(statement)) => {
                        let deps = BTreeSet::from([agent.name.clone()]);
                        if agent.learn(statement.clone(), Provenance::Inference, deps)? {
                            learned.push((statement, Provenance::Inference));
                        }
                    }
                    Ok(None) => notes.push(format!("[t={time}] {} is not certain of {target}", agent.name)),
                    Err(ReasoningError::InconsistentConditioning(c)) => {
                        notes.push(format!("[t={time}] {}: conditioning on {c} is vacuous", agent.name))
                    }
                    Err(e) => return Err(e),
                }
            }
            InferenceStep::Simulate { agent: other, given } => {
                let Some(atom) = agent.value_of(given).cloned() else {
                    notes.push(format!("[t={time}] {} is not certain of {given}; cannot reason as {other}", agent.name));
                    return Ok(());
                };
                if depth + 1 >= agent.max_depth {
                    notes.push(format!("[t={time}] {}: nesting bound reached simulating {other}", agent.name));
                    return Ok(());
                }
                let hypothetical = self.simulate_agent(other, &atom, schedule, depth + 1, notes)?;
                for entry in hypothetical.knowledge() {
                    if entry.provenance == Provenance::Observation {
                        continue;
                    }
                    let body = Body::certain(other.clone(), entry.statement.body.clone());
                    let mut deps = entry.depends_on.clone();
                    deps.insert(other.clone());
                    deps.insert(agent.name.clone());
                    let statement = Statement::new(agent.name.clone(), time, body);
                    if agent.learn(statement.clone(), Provenance::Inference, deps)? {
                        learned.push((statement, Provenance::Inference));
                    }
                }
            }
            InferenceStep::Adopt => {
                for statement in adopt_all(agent, time)? {
                    learned.push((statement, Provenance::Adoption));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Runs `name`'s reasoning program on a hypothetical copy that observed
    /// `observation`.
    fn simulate_agent(
        &self,
        name: &str,
        observation: &Atom,
        schedule: &[ScheduledItem],
        depth: usize,
        notes: &mut Vec<String>,
    ) -> Result<Agent> {
        let mut hypo = Agent::new(name);
        hypo.learn(
            Statement::atom(name, observation.time, observation.clone()),
            Provenance::Observation,
            BTreeSet::from([name.to_string()]),
        )?;
        let mut scratch = Vec::new();
        let mut inner_notes = Vec::new();
        for item in schedule.iter().filter(|i| i.actor == name) {
            if let ScheduleItem::Infer(step @ (InferenceStep::Predict { .. } | InferenceStep::Simulate { .. } | InferenceStep::Adopt)) = &item.item {
                self.apply_program_step(&mut hypo, step, item.time, schedule, depth, &mut scratch, &mut inner_notes)?;
            }
        }
        let _ = notes;
        Ok(hypo)
    }
}

fn agent_mut<'a>(agents: &'a mut BTreeMap<String, Agent>, name: &str) -> Result<&'a mut Agent> {
    agents
        .get_mut(name)
        .ok_or_else(|| ReasoningError::View(format!("unknown agent `{name}`")))
}

fn agent_ref<'a>(agents: &'a BTreeMap<String, Agent>, name: &str) -> Result<&'a Agent> {
    agents.get(name).ok_or_else(|| ReasoningError::View(format!("unknown agent `{name}`")))
}

/// Rule C: from "certain that B is certain that s" conclude "certain that s".
pub fn rule_c(agent: &mut Agent, nested: &Body, time: u32) -> Result<Statement> {
    let entry = agent
        .entry_for(nested)
        .ok_or_else(|| AgentError::Provenance(format!("{} does not hold `{nested}`", agent.name)))?
        .clone();
    let Body::Certain { body, .. } = nested else {
        return Err(AgentError::Provenance(format!("`{nested}` has no nesting to strip")).into());
    };
    let mut deps = entry.depends_on;
    deps.insert(agent.name.clone());
    let statement = Statement::new(agent.name.clone(), time, (**body).clone());
    agent.learn(statement.clone(), Provenance::Adoption, deps)?;
    Ok(statement)
}

/// Applies rule C until no new statement appears; returns the new ones.
pub fn adopt_all(agent: &mut Agent, time: u32) -> Result<Vec<Statement>> {
    let mut new = Vec::new();
    loop {
        let nested: Vec<Body> = agent
            .knowledge()
            .iter()
            .filter_map(|e| match &e.statement.body {
                b @ Body::Certain { body, .. } if !agent.holds(body) => Some(b.clone()),
                _ => None,
            })
            .collect();
        if nested.is_empty() {
            return Ok(new);
        }
        for b in nested {
            let Body::Certain { body, .. } = &b else { unreachable!() };
            if agent.holds(body) {
                continue;
            }
            new.push(rule_c(agent, &b, time)?);
        }
    }
}

/// Rule S: a contradiction iff the agent holds two atoms on the same
/// variable and time with different values. The non-observed atom is
/// listed first.
pub fn rule_s_check(agent: &Agent) -> Option<Contradiction> {
    let atoms: Vec<(&Atom, bool)> = agent
        .knowledge()
        .iter()
        .filter_map(|e| e.statement.body.as_atom().map(|a| (a, e.provenance == Provenance::Observation)))
        .collect();
    for (i, (a, a_obs)) in atoms.iter().enumerate() {
        for (b, b_obs) in &atoms[i + 1..] {
            if a.conflicts_with(b) {
                let pair = if *a_obs && !b_obs { ((*b).clone(), (*a).clone()) } else { ((*a).clone(), (*b).clone()) };
                return Some(Contradiction { agent: agent.name.clone(), time: a.time.max(b.time), atoms: pair });
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with(agent: &str, entries: &[(Body, Provenance)]) -> Agent {
        let mut a = Agent::new(agent);
        for (b, p) in entries {
            a.learn(Statement::new(agent, 1, b.clone()), p.clone(), BTreeSet::from([agent.to_string()])).unwrap();
        }
        a
    }

    fn atom(v: &str, val: &str, t: u32) -> Body {
        Body::Atom(Atom::new(v, val, t))
    }

    #[test]
    fn rule_c_strips_one_level() {
        let nested = Body::certain("Alice", atom("w", "fail", 4));
        let mut bob = with("Bob", &[(nested.clone(), Provenance::Inference)]);
        let s = rule_c(&mut bob, &nested, 2).unwrap();
        assert_eq!(s.render(), "[t=2] Bob: \"I am certain that w=fail at t=4.\"");
        assert_eq!(bob.knowledge().last().unwrap().provenance, Provenance::Adoption);
    }

    #[test]
    fn rule_c_requires_the_nested_statement() {
        let mut bob = Agent::new("Bob");
        let nested = Body::certain("Alice", atom("w", "fail", 4));
        assert!(matches!(rule_c(&mut bob, &nested, 2), Err(ReasoningError::Agent(AgentError::Provenance(_)))));
    }

    #[test]
    fn depth_three_flattens_in_three_steps() {
        let chain = Body::certain("U", Body::certain("B", Body::certain("A", atom("w", "fail", 4))));
        let mut wigner = with("W", &[(chain, Provenance::AnnouncementReceived { from: "U".into() })]);
        let new = adopt_all(&mut wigner, 4).unwrap();
        assert_eq!(new.len(), 3);
        assert_eq!(new.last().unwrap().body, atom("w", "fail", 4));
    }

    #[test]
    fn rule_s_flags_conflicting_atoms() {
        let wigner = with("Wigner", &[(atom("w", "ok", 4), Provenance::Observation), (atom("w", "fail", 4), Provenance::Adoption)]);
        let c = rule_s_check(&wigner).unwrap();
        assert_eq!(c.atoms.0.value, "fail");
        assert_eq!(c.render(), "[t=4] Wigner: \"I am certain that w=fail and I am certain that w=ok.\"");
        assert!(rule_s_check(&with("Alice", &[(atom("a", "1", 1), Provenance::Observation)])).is_none());
    }

    #[test]
    fn rule_s_is_per_agent() {
        let alice = with("Alice", &[(atom("w", "fail", 4), Provenance::Inference)]);
        let wigner = with("Wigner", &[(atom("w", "ok", 4), Provenance::Observation)]);
        assert!(rule_s_check(&alice).is_none());
        assert!(rule_s_check(&wigner).is_none());
    }

    #[test]
    fn different_times_do_not_conflict() {
        let a = with("X", &[(atom("z", "0", 1), Provenance::Observation), (atom("z", "1", 2), Provenance::Observation)]);
        assert!(rule_s_check(&a).is_none());
    }
}
