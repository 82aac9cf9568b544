//! Agents as information-processing systems: a memory register, a view of
//! the experiment, and an append-only knowledge base of certainty statements.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::CircuitView;

/// Nesting bound for `Certain(..)` chains; enough for Wigner→Ursula→Bob→Alice.
pub const DEFAULT_MAX_DEPTH: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("provenance error: {0}")]
    Provenance(String),
    #[error("statement nesting depth {depth} exceeds the bound {max}")]
    DepthExceeded { depth: usize, max: usize },
    #[error("announcement from {from} is not addressed to {to}")]
    NotAddressed { from: String, to: String },
}

pub type Result<T> = std::result::Result<T, AgentError>;

/// `variable = value` at protocol time `time`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Atom {
    pub variable: String,
    pub value: String,
    pub time: u32,
}

impl Atom {
    pub fn new(variable: impl Into<String>, value: impl Into<String>, time: u32) -> Self {
        Self { variable: variable.into(), value: value.into(), time }
    }

    /// Same variable and time, different value.
    pub fn conflicts_with(&self, other: &Atom) -> bool {
        self.variable == other.variable && self.time == other.time && self.value != other.value
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={} at t={}", self.variable, self.value, self.time)
    }
}

/// What a statement asserts the speaker is certain of.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Body {
    Atom(Atom),
    Certain { agent: String, body: Box<Body> },
}

impl Body {
    pub fn certain(agent: impl Into<String>, body: Body) -> Self {
        Body::Certain { agent: agent.into(), body: Box::new(body) }
    }

    /// Number of `Certain` layers above the atom.
    pub fn depth(&self) -> usize {
        match self {
            Body::Atom(_) => 0,
            Body::Certain { body, .. } => 1 + body.depth(),
        }
    }

    pub fn atom(&self) -> &Atom {
        match self {
            Body::Atom(a) => a,
            Body::Certain { body, .. } => body.atom(),
        }
    }

    pub fn as_atom(&self) -> Option<&Atom> {
        match self {
            Body::Atom(a) => Some(a),
            Body::Certain { .. } => None,
        }
    }

    fn render_into(&self, out: &mut String) {
        match self {
            Body::Atom(a) => out.push_str(&a.to_string()),
            Body::Certain { agent, body } => {
                out.push_str(agent);
                out.push_str(" is certain that ");
                body.render_into(out);
            }
        }
    }
}

impl fmt::Display for Body {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        self.render_into(&mut s);
        f.write_str(&s)
    }
}

/// "I am certain that ..." made by `speaker` at protocol time `time`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Statement {
    pub speaker: String,
    pub time: u32,
    pub body: Body,
}

impl Statement {
    pub fn new(speaker: impl Into<String>, time: u32, body: Body) -> Self {
        Self { speaker: speaker.into(), time, body }
    }

    pub fn atom(speaker: impl Into<String>, time: u32, atom: Atom) -> Self {
        Self::new(speaker, time, Body::Atom(atom))
    }

    /// `[t=<n>] <agent>: "I am certain that <...>."`
    pub fn render(&self) -> String {
        format!("[t={}] {}: \"I am certain that {}.\"", self.time, self.speaker, self.body)
    }
}

impl fmt::Display for Statement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// How a knowledge entry came about.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    /// Rule S: the agent's own measurement outcome.
    Observation,
    /// Rule Q: Born-rule certainty within a view.
    Inference,
    /// Rule C: one nesting level stripped.
    Adoption,
    AnnouncementReceived { from: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub statement: Statement,
    pub provenance: Provenance,
    /// Agents whose observations or reasoning the entry rests on.
    pub depends_on: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipient {
    Agent(String),
    Broadcast,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Announcement {
    pub from: String,
    pub to: Recipient,
    pub statement: Statement,
    pub time: u32,
}

/// A measurement outcome as it appears in a run trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedOutcome {
    pub actor: String,
    pub variable: String,
    pub value: String,
    pub time: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub name: String,
    pub memory_register: Option<String>,
    pub view: Option<CircuitView>,
    /// Coarse statement label currently held in the memory register.
    pub memory_label: Option<String>,
    pub max_depth: usize,
    knowledge: Vec<KnowledgeEntry>,
}

impl Agent {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            memory_register: None,
            view: None,
            memory_label: None,
            max_depth: DEFAULT_MAX_DEPTH,
            knowledge: Vec::new(),
        }
    }

    pub fn with_memory(mut self, register: impl Into<String>) -> Self {
        self.memory_register = Some(register.into());
        self
    }

    pub fn with_view(mut self, view: CircuitView) -> Self {
        self.view = Some(view);
        self
    }

    pub fn knowledge(&self) -> &[KnowledgeEntry] {
        &self.knowledge
    }

    pub fn holds(&self, body: &Body) -> bool {
        self.knowledge.iter().any(|e| &e.statement.body == body)
    }

    pub fn entry_for(&self, body: &Body) -> Option<&KnowledgeEntry> {
        self.knowledge.iter().find(|e| &e.statement.body == body)
    }

    /// Atoms held directly (depth 0).
    pub fn atoms(&self) -> impl Iterator<Item = &Atom> {
        self.knowledge.iter().filter_map(|e| e.statement.body.as_atom())
    }

    /// Atoms the agent observed itself.
    pub fn observed_atoms(&self) -> impl Iterator<Item = &Atom> {
        self.knowledge
            .iter()
            .filter(|e| e.provenance == Provenance::Observation)
            .filter_map(|e| e.statement.body.as_atom())
    }

    /// The agent's certain value of `variable`, if any.
    pub fn value_of(&self, variable: &str) -> Option<&Atom> {
        self.atoms().find(|a| a.variable == variable)
    }

    /// Appends an entry unless an identical body is already held. Returns
    /// whether the knowledge base grew.
    pub fn learn(&mut self, statement: Statement, provenance: Provenance, depends_on: BTreeSet<String>) -> Result<bool> {
        let depth = statement.body.depth();
        if depth > self.max_depth {
            return Err(AgentError::DepthExceeded { depth, max: self.max_depth });
        }
        if self.holds(&statement.body) {
            return Ok(false);
        }
        self.knowledge.push(KnowledgeEntry { statement, provenance, depends_on });
        Ok(true)
    }

    /// Removes entries matching `strike`, returning them. Only the
    /// invalidation policy calls this.
    pub fn invalidate<F: Fn(&KnowledgeEntry) -> bool>(&mut self, strike: F) -> Vec<KnowledgeEntry> {
        let (gone, kept): (Vec<_>, Vec<_>) = self.knowledge.drain(..).partition(|e| strike(e));
        self.knowledge = kept;
        gone
    }
}

/// Memory label for an observed outcome, e.g. `I am certain that a=1.`
pub fn memory_label(variable: &str, value: &str) -> String {
    format!("I am certain that {variable}={value}.")
}

/// Rule S bookkeeping: records an outcome the agent actually obtained.
pub fn record_observation(
    agent: &mut Agent,
    variable: &str,
    value: &str,
    time: u32,
    trace: &[ObservedOutcome],
) -> Result<Statement> {
    let found = trace
        .iter()
        .any(|o| o.actor == agent.name && o.variable == variable && o.value == value && o.time == time);
    if !found {
        return Err(AgentError::Provenance(format!(
            "no measurement of {variable}={value} at t={time} by {} in the trace",
            agent.name
        )));
    }
    let statement = Statement::atom(agent.name.clone(), time, Atom::new(variable, value, time));
    let deps = BTreeSet::from([agent.name.clone()]);
    agent.learn(statement.clone(), Provenance::Observation, deps)?;
    agent.memory_label = Some(memory_label(variable, value));
    Ok(statement)
}

/// Builds an announcement, checking the sender actually holds the statement.
pub fn announce(sender: &Agent, body: &Body, to: Recipient, time: u32) -> Result<Announcement> {
    if !sender.holds(body) {
        return Err(AgentError::Provenance(format!("{} does not hold `{body}`", sender.name)));
    }
    Ok(Announcement {
        from: sender.name.clone(),
        to,
        statement: Statement::new(sender.name.clone(), time, body.clone()),
        time,
    })
}

/// Stores `Certain(sender, statement)` in the receiver's knowledge.
/// Self-announcements are no-ops.
pub fn receive_announcement(receiver: &mut Agent, sender: &Agent, ann: &Announcement) -> Result<bool> {
    if ann.from != sender.name {
        return Err(AgentError::Provenance(format!("announcement claims sender {} but came from {}", ann.from, sender.name)));
    }
    match &ann.to {
        Recipient::Broadcast => {}
        Recipient::Agent(n) if *n == receiver.name => {}
        Recipient::Agent(_) => {
            return Err(AgentError::NotAddressed { from: ann.from.clone(), to: receiver.name.clone() });
        }
    }
    if !sender.holds(&ann.statement.body) {
        return Err(AgentError::Provenance(format!("{} does not hold `{}`", sender.name, ann.statement.body)));
    }
    if ann.from == receiver.name {
        return Ok(false);
    }
    let mut deps = sender
        .entry_for(&ann.statement.body)
        .map(|e| e.depends_on.clone())
        .unwrap_or_default();
    deps.insert(sender.name.clone());
    deps.insert(receiver.name.clone());
    let body = Body::certain(ann.from.clone(), ann.statement.body.clone());
    receiver.learn(
        Statement::new(receiver.name.clone(), ann.time, body),
        Provenance::AnnouncementReceived { from: ann.from.clone() },
        deps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(actor: &str, var: &str, value: &str, time: u32) -> ObservedOutcome {
        ObservedOutcome { actor: actor.into(), variable: var.into(), value: value.into(), time }
    }

    #[test]
    fn observation_renders_like_the_protocol() {
        let mut alice = Agent::new("Alice").with_memory("A");
        let s = record_observation(&mut alice, "a", "1", 1, &[obs("Alice", "a", "1", 1)]).unwrap();
        assert_eq!(s.render(), "[t=1] Alice: \"I am certain that a=1 at t=1.\"");
        assert_eq!(alice.memory_label.as_deref(), Some("I am certain that a=1."));
        let mut bob = Agent::new("Bob");
        let s = record_observation(&mut bob, "b", "1", 2, &[obs("Bob", "b", "1", 2)]).unwrap();
        assert_eq!(s.render(), "[t=2] Bob: \"I am certain that b=1 at t=2.\"");
        let mut ursula = Agent::new("Ursula");
        record_observation(&mut ursula, "u", "ok", 3, &[obs("Ursula", "u", "ok", 3)]).unwrap();
        assert_eq!(ursula.value_of("u").unwrap().value, "ok");
    }

    #[test]
    fn observation_without_trace_event_is_rejected() {
        let mut alice = Agent::new("Alice");
        let err = record_observation(&mut alice, "a", "1", 1, &[obs("Alice", "a", "0", 1)]).unwrap_err();
        assert!(matches!(err, AgentError::Provenance(_)));
        assert!(alice.knowledge().is_empty());
    }

    #[test]
    fn announcement_is_nested_in_receiver() {
        let mut ursula = Agent::new("Ursula");
        let fail = Body::Atom(Atom::new("w", "fail", 4));
        ursula
            .learn(Statement::new("Ursula", 3, fail.clone()), Provenance::Adoption, BTreeSet::from(["Ursula".to_string()]))
            .unwrap();
        let mut wigner = Agent::new("Wigner");
        let ann = announce(&ursula, &fail, Recipient::Agent("Wigner".into()), 4).unwrap();
        assert!(receive_announcement(&mut wigner, &ursula, &ann).unwrap());
        let e = &wigner.knowledge()[0];
        assert_eq!(e.statement.render(), "[t=4] Wigner: \"I am certain that Ursula is certain that w=fail at t=4.\"");
        assert_eq!(e.provenance, Provenance::AnnouncementReceived { from: "Ursula".into() });
    }

    #[test]
    fn broadcast_reaches_everyone_and_self_is_noop() {
        let mut ursula = Agent::new("Ursula");
        let fail = Body::Atom(Atom::new("w", "fail", 4));
        ursula.learn(Statement::new("Ursula", 3, fail.clone()), Provenance::Adoption, BTreeSet::new()).unwrap();
        let ann = announce(&ursula, &fail, Recipient::Broadcast, 3).unwrap();
        for name in ["Wigner", "Alice", "Bob"] {
            let mut a = Agent::new(name);
            assert!(receive_announcement(&mut a, &ursula, &ann).unwrap());
            assert_eq!(a.knowledge()[0].statement.body, Body::certain("Ursula", fail.clone()));
        }
        let mut copy = ursula.clone();
        assert!(!receive_announcement(&mut copy, &ursula, &ann).unwrap());
        assert_eq!(copy.knowledge().len(), 1);
    }

    #[test]
    fn cannot_announce_what_you_do_not_hold() {
        let ursula = Agent::new("Ursula");
        let body = Body::Atom(Atom::new("w", "fail", 4));
        assert!(announce(&ursula, &body, Recipient::Broadcast, 3).is_err());
        let forged = Announcement {
            from: "Ursula".into(),
            to: Recipient::Broadcast,
            statement: Statement::new("Ursula", 3, body),
            time: 3,
        };
        let mut wigner = Agent::new("Wigner");
        assert!(receive_announcement(&mut wigner, &ursula, &forged).is_err());
    }

    #[test]
    fn misaddressed_announcement_is_rejected() {
        let mut ursula = Agent::new("Ursula");
        let body = Body::Atom(Atom::new("w", "fail", 4));
        ursula.learn(Statement::new("Ursula", 3, body.clone()), Provenance::Adoption, BTreeSet::new()).unwrap();
        let ann = announce(&ursula, &body, Recipient::Agent("Wigner".into()), 3).unwrap();
        let mut alice = Agent::new("Alice");
        assert!(matches!(receive_announcement(&mut alice, &ursula, &ann), Err(AgentError::NotAddressed { .. })));
    }

    #[test]
    fn depth_bound_enforced() {
        let mut a = Agent::new("X");
        let mut body = Body::Atom(Atom::new("z", "1", 1));
        for name in ["A", "B", "C", "D", "E"] {
            body = Body::certain(name, body);
        }
        assert_eq!(body.depth(), 5);
        assert!(matches!(
            a.learn(Statement::new("X", 1, body), Provenance::Inference, BTreeSet::new()),
            Err(AgentError::DepthExceeded { .. })
        ));
    }

    #[test]
    fn knowledge_serializes_deterministically() {
        let mut alice = Agent::new("Alice");
        record_observation(&mut alice, "a", "1", 1, &[obs("Alice", "a", "1", 1)]).unwrap();
        let a = serde_json::to_string(alice.knowledge()).unwrap();
        let b = serde_json::to_string(alice.clone().knowledge()).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("\"observation\""));
    }
}
