//! Simulation and reasoning engine for observer-inclusive quantum thought
//! experiments: Wigner's friend, its notebook variant and the four-agent
//! protocol with two friends and two outside observers.

pub mod agents;
pub mod circuit;
pub mod harness;
pub mod hilbert;
pub mod policies;
pub mod protocols;
pub mod reasoning;

pub use agents::{Agent, Atom, Body, KnowledgeEntry, Provenance, Statement};
pub use circuit::{CircuitView, FriendMeasurement, WireKind};
pub use harness::{replay, run, HarnessError, Mode, Report, RunConfig};
pub use hilbert::{Distribution, LinearOp, MeasurementSpec, RegisterSpec, Role, StateVector};
pub use policies::{Cut, Policy, PolicyViolation, PredictionMatrix};
pub use protocols::{exact_analysis, execute, Engine, ExactAnalysis, ExperimentScript, RunTrace, Verdict};
pub use reasoning::{Contradiction, InferenceStep, Reasoner, RuleQQuery};
