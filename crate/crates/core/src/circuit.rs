//! Named operations of the thought experiments: friend measurements and
//! their inverses, ok/fail bases, notebook writes, the Hadamarding circuits,
//! and per-agent circuit views.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hilbert::{HilbertError, LinearOp, MeasurementSpec, RegisterSpec, StateVector, ALGEBRA_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CircuitError {
    #[error("invalid circuit spec: {0}")]
    InvalidSpec(String),
    #[error("views disagree on shared gates: {0}")]
    ViewMismatch(String),
    #[error(transparent)]
    Hilbert(#[from] HilbertError),
}

pub type Result<T> = std::result::Result<T, CircuitError>;

pub const OK: &str = "ok";
pub const FAIL: &str = "fail";
pub const OTHER: &str = "other";
pub const NOTEBOOK_EMPTY: &str = "empty";
pub const NOTEBOOK_DEFINITIVE: &str = "I observed a definitive outcome.";

/// An agent measuring a system inside an isolated lab, seen from outside as
/// `|i⟩ ⊗ |ready⟩ ⊗ |env⟩ ↦ |lab_i⟩ = |i⟩ ⊗ |outcome_i⟩ ⊗ |env_i⟩`.
///
/// Environment branches are `env_0 = |0⟩` and
/// `env_i = overlap·|0⟩ + √(1 − overlap²)·|i⟩`; the default overlap 0 makes
/// them orthogonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FriendMeasurement {
    pub observed: RegisterSpec,
    pub memory: RegisterSpec,
    pub environment: RegisterSpec,
    pub ready_label: String,
    /// Memory label written for each observed basis index.
    pub outcome_labels: Vec<String>,
    #[serde(default)]
    pub env_overlap: f64,
}

impl FriendMeasurement {
    pub fn new(
        observed: RegisterSpec,
        memory: RegisterSpec,
        environment: RegisterSpec,
        ready_label: impl Into<String>,
        outcome_labels: Vec<String>,
    ) -> Result<Self> {
        let fm = Self {
            observed,
            memory,
            environment,
            ready_label: ready_label.into(),
            outcome_labels,
            env_overlap: 0.0,
        };
        fm.validate()?;
        Ok(fm)
    }

    pub fn with_env_overlap(mut self, overlap: f64) -> Result<Self> {
        self.env_overlap = overlap;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.observed.dim();
        if self.outcome_labels.len() != d {
            return Err(CircuitError::InvalidSpec(format!(
                "{} outcome labels for observed register `{}` of dimension {d}",
                self.outcome_labels.len(),
                self.observed.name()
            )));
        }
        let ready = self.memory.index_of(&self.ready_label).map_err(|e| CircuitError::InvalidSpec(e.to_string()))?;
        let mut seen = BTreeSet::from([ready]);
        for l in &self.outcome_labels {
            let i = self.memory.index_of(l).map_err(|e| CircuitError::InvalidSpec(e.to_string()))?;
            if !seen.insert(i) {
                return Err(CircuitError::InvalidSpec(format!("memory label `{l}` used twice")));
            }
        }
        if self.environment.dim() < d {
            return Err(CircuitError::InvalidSpec(format!(
                "environment `{}` needs dimension >= {d}",
                self.environment.name()
            )));
        }
        if !(0.0..=1.0).contains(&self.env_overlap) {
            return Err(CircuitError::InvalidSpec(format!("env overlap {} outside [0, 1]", self.env_overlap)));
        }
        let names = [self.observed.name(), self.memory.name(), self.environment.name()];
        if names[0] == names[1] || names[0] == names[2] || names[1] == names[2] {
            return Err(CircuitError::InvalidSpec("lab registers must be distinct".into()));
        }
        Ok(())
    }

    /// Lab register names in canonical order (observed, memory, environment).
    pub fn lab_registers(&self) -> Vec<String> {
        vec![
            self.observed.name().to_string(),
            self.memory.name().to_string(),
            self.environment.name().to_string(),
        ]
    }

    pub fn outcome_count(&self) -> usize {
        self.observed.dim()
    }

    pub fn ready_index(&self) -> usize {
        self.memory.index_of(&self.ready_label).expect("validated")
    }

    pub fn outcome_memory_index(&self, i: usize) -> usize {
        self.memory.index_of(&self.outcome_labels[i]).expect("validated")
    }

    /// Observed-register label corresponding to outcome `i`.
    pub fn outcome_value(&self, i: usize) -> &str {
        self.observed.label(i).expect("index in range")
    }

    fn env_vector(&self, i: usize) -> Vec<Complex64> {
        let mut v = vec![Complex64::new(0.0, 0.0); self.environment.dim()];
        if i == 0 {
            v[0] = Complex64::new(1.0, 0.0);
        } else {
            let o = self.env_overlap;
            v[0] = Complex64::new(o, 0.0);
            v[i] = Complex64::new((1.0 - o * o).sqrt(), 0.0);
        }
        v
    }

    fn env_state(&self, i: usize) -> StateVector {
        StateVector::new(vec![self.environment.clone()], self.env_vector(i)).expect("normalized env branch")
    }

    fn ready_memory(&self) -> StateVector {
        StateVector::basis_index(self.memory.clone(), self.ready_index()).expect("ready index")
    }

    /// `|ψ⟩_observed ⊗ |ready⟩ ⊗ |env⟩`.
    pub fn ready_state(&self, observed: &StateVector) -> Result<StateVector> {
        if observed.registers() != std::slice::from_ref(&self.observed) {
            return Err(CircuitError::InvalidSpec("state must live on the observed register only".into()));
        }
        Ok(StateVector::tensor(&[observed.clone(), self.ready_memory(), self.env_state(0)])?)
    }

    /// `|lab_i⟩`.
    pub fn lab_state(&self, i: usize) -> Result<StateVector> {
        if i >= self.outcome_count() {
            return Err(CircuitError::InvalidSpec(format!("no outcome {i}")));
        }
        let sys = StateVector::basis_index(self.observed.clone(), i)?;
        let mem = StateVector::basis_index(self.memory.clone(), self.outcome_memory_index(i))?;
        Ok(StateVector::tensor(&[sys, mem, self.env_state(i)])?)
    }

    /// Normalized combination `Σ c_i |lab_i⟩`.
    pub fn lab_combination(&self, coeffs: &[f64]) -> Result<StateVector> {
        let labs: Vec<StateVector> = (0..coeffs.len()).map(|i| self.lab_state(i)).collect::<Result<_>>()?;
        let regs = labs[0].registers().to_vec();
        let amps = (0..labs[0].dim())
            .map(|g| labs.iter().zip(coeffs).map(|(l, c)| l.amplitudes()[g] * c).sum())
            .collect();
        Ok(StateVector::new(regs, amps)?)
    }

    /// `|lab_+⟩ = (|lab_0⟩ + |lab_1⟩)/√2`.
    pub fn lab_plus(&self) -> Result<StateVector> {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        self.lab_combination(&[h, h])
    }
}

/// Extends an orthonormal family to a basis of `C^dim` by Gram-Schmidt over
/// the standard basis.
fn complete_basis(family: &[DVector<Complex64>], dim: usize) -> Vec<DVector<Complex64>> {
    let mut basis: Vec<DVector<Complex64>> = family.to_vec();
    for k in 0..dim {
        if basis.len() == dim {
            break;
        }
        let mut v = DVector::from_element(dim, Complex64::new(0.0, 0.0));
        v[k] = Complex64::new(1.0, 0.0);
        for b in &basis {
            let c = b.dotc(&v);
            v -= b * c;
        }
        let n = v.norm();
        if n > 1e-8 {
            basis.push(v / Complex64::new(n, 0.0));
        }
    }
    basis
}

/// A unitary mapping `inputs[k] ↦ outputs[k]`, completed deterministically.
fn unitary_completion(inputs: &[DVector<Complex64>], outputs: &[DVector<Complex64>], dim: usize) -> DMatrix<Complex64> {
    let ins = complete_basis(inputs, dim);
    let outs = complete_basis(outputs, dim);
    let mut u = DMatrix::zeros(dim, dim);
    for (e, f) in ins.iter().zip(&outs) {
        u += f * e.adjoint();
    }
    u
}

/// Friend measurement as a unitary on the lab registers. Restricted to
/// inputs with memory ready and environment in `|env⟩` it is the isometry
/// `|i⟩|ready⟩|env⟩ ↦ |lab_i⟩`.
pub fn build_friend_measurement(spec: &FriendMeasurement) -> Result<LinearOp> {
    spec.validate()?;
    let regs = [spec.observed.clone(), spec.memory.clone(), spec.environment.clone()];
    let dim: usize = regs.iter().map(RegisterSpec::dim).product();
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    for i in 0..spec.outcome_count() {
        let sys = StateVector::basis_index(spec.observed.clone(), i)?;
        inputs.push(DVector::from_column_slice(spec.ready_state(&sys)?.amplitudes()));
        outputs.push(DVector::from_column_slice(spec.lab_state(i)?.amplitudes()));
    }
    let u = unitary_completion(&inputs, &outputs, dim);
    Ok(LinearOp::unitary(spec.lab_registers(), u)?)
}

/// Inverse of [`build_friend_measurement`]: `|lab_i⟩ ↦ |i⟩|ready⟩|env⟩`.
pub fn build_undo(spec: &FriendMeasurement) -> Result<LinearOp> {
    Ok(build_friend_measurement(spec)?.adjoint()?)
}

/// The two-outcome lab basis used by outside agents.
#[derive(Debug, Clone, PartialEq)]
pub struct OkFailBasis {
    pub lab_registers: Vec<String>,
    pub ok_state: StateVector,
    pub fail_state: StateVector,
}

impl OkFailBasis {
    /// `ok = (|lab_0⟩ − |lab_1⟩)/√2`, `fail = (|lab_0⟩ + |lab_1⟩)/√2`.
    pub fn new(fm: &FriendMeasurement) -> Result<Self> {
        if fm.outcome_count() != 2 {
            return Err(CircuitError::InvalidSpec("ok/fail basis needs a two-outcome lab".into()));
        }
        let h = std::f64::consts::FRAC_1_SQRT_2;
        Ok(Self {
            lab_registers: fm.lab_registers(),
            ok_state: fm.lab_combination(&[h, -h])?,
            fail_state: fm.lab_combination(&[h, h])?,
        })
    }

    pub fn measurement(&self) -> Result<MeasurementSpec> {
        Ok(MeasurementSpec::new(
            vec![self.ok_state.clone(), self.fail_state.clone()],
            vec![OK.into(), FAIL.into()],
            Some(OTHER.into()),
        )?)
    }
}

/// ok/fail measurement of the lab `lab` (which must list the friend
/// measurement's registers in order), completed by an `other` outcome.
pub fn build_ok_fail(lab: &[&str], fm: &FriendMeasurement) -> Result<MeasurementSpec> {
    let expected = fm.lab_registers();
    if lab.len() != expected.len() || lab.iter().zip(&expected).any(|(a, b)| a != b) {
        return Err(CircuitError::InvalidSpec(format!("lab {lab:?} does not match friend measurement registers {expected:?}")));
    }
    OkFailBasis::new(fm)?.measurement()
}

/// What the friend writes into the notebook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotebookContent {
    /// Only that a definitive outcome was seen.
    Definitive,
    /// The outcome itself; the notebook label for outcome `i` equals the
    /// memory label for `i`.
    Outcome,
}

/// Notebook write as a permutation unitary on `(memory, notebook)`:
/// `|outcome_i⟩|empty⟩ ↔ |outcome_i⟩|note_i⟩`, identity elsewhere.
pub fn build_notebook_write(fm: &FriendMeasurement, notebook: &RegisterSpec, content: NotebookContent) -> Result<LinearOp> {
    fm.validate()?;
    if notebook.name() == fm.memory.name() {
        return Err(CircuitError::InvalidSpec("notebook must differ from memory".into()));
    }
    let lookup = |l: &str| notebook.index_of(l).map_err(|e| CircuitError::InvalidSpec(e.to_string()));
    let empty = lookup(NOTEBOOK_EMPTY)?;
    let notes: Vec<usize> = match content {
        NotebookContent::Definitive => vec![lookup(NOTEBOOK_DEFINITIVE)?; fm.outcome_count()],
        NotebookContent::Outcome => fm.outcome_labels.iter().map(|l| lookup(l)).collect::<Result<_>>()?,
    };
    let dn = notebook.dim();
    let dim = fm.memory.dim() * dn;
    let mut perm: Vec<usize> = (0..dim).collect();
    for (i, &note) in notes.iter().enumerate() {
        let m = fm.outcome_memory_index(i);
        perm.swap(m * dn + empty, m * dn + note);
    }
    let u = DMatrix::from_fn(dim, dim, |r, c| if perm[c] == r { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) });
    Ok(LinearOp::unitary(vec![fm.memory.name().to_string(), notebook.name().to_string()], u)?)
}

/// The two circuit forms of a dual-basis measurement of a one-qubit lab.
#[derive(Debug, Clone)]
pub struct HadamardingCircuits {
    pub lab: String,
    pub record: String,
    /// `H(L) · CNOT(L→rec) · H(L)`: measure in `{|+⟩, |−⟩}` by copying.
    pub circuit_a: Vec<LinearOp>,
    /// `H(rec) · CNOT(rec→L) · H(rec)`: a random bit is added to the lab.
    pub circuit_b: Vec<LinearOp>,
}

/// Splits a dual-basis measurement of a qubit lab `L` into its two
/// equivalent circuit forms. The record wire defaults to `w`.
pub fn hadamarding_decomposition(m: &MeasurementSpec) -> Result<HadamardingCircuits> {
    let regs = m.target_registers();
    if regs.len() != 1 || regs[0].dim() != 2 || m.basis().len() != 2 {
        return Err(CircuitError::InvalidSpec("Hadamarding needs a two-outcome measurement of one qubit".into()));
    }
    let lab = regs[0].name().to_string();
    let plus = StateVector::plus(regs[0].clone())?;
    for b in m.basis() {
        let o = plus.inner_product(b)?.norm();
        if o.abs() > ALGEBRA_TOL && (o - 1.0).abs() > ALGEBRA_TOL {
            return Err(CircuitError::InvalidSpec("measurement is not in the dual basis".into()));
        }
    }
    let record = m.record().unwrap_or("w").to_string();
    if record == lab {
        return Err(CircuitError::InvalidSpec("record wire must differ from the lab".into()));
    }
    Ok(HadamardingCircuits {
        circuit_a: vec![LinearOp::hadamard(&lab), LinearOp::cnot(&lab, &record), LinearOp::hadamard(&lab)],
        circuit_b: vec![LinearOp::hadamard(&record), LinearOp::cnot(&record, &lab), LinearOp::hadamard(&record)],
        lab,
        record,
    })
}

/// Matrix of a gate sequence on `registers`, built column by column.
pub fn sequence_matrix(ops: &[LinearOp], registers: &[RegisterSpec]) -> Result<DMatrix<Complex64>> {
    let dim: usize = registers.iter().map(RegisterSpec::dim).product();
    let mut out = DMatrix::zeros(dim, dim);
    for c in 0..dim {
        let mut amps = vec![Complex64::new(0.0, 0.0); dim];
        amps[c] = Complex64::new(1.0, 0.0);
        let col = StateVector::unnormalized(registers.to_vec(), amps)?.apply_all(ops)?;
        for (r, a) in col.amplitudes().iter().enumerate() {
            out[(r, c)] = *a;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireKind {
    Quantum,
    Classical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wire {
    pub register: String,
    pub kind: WireKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewGate {
    pub id: String,
    pub registers: Vec<String>,
    /// Rectangular box if true, rounded (non-unitary) box otherwise.
    pub unitary: bool,
}

/// One agent's circuit description of an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitView {
    pub agent: String,
    pub wires: Vec<Wire>,
    pub gates: Vec<ViewGate>,
}

impl CircuitView {
    pub fn new(agent: impl Into<String>) -> Self {
        Self { agent: agent.into(), wires: Vec::new(), gates: Vec::new() }
    }

    pub fn wire(mut self, register: &str, kind: WireKind) -> Self {
        self.wires.push(Wire { register: register.to_string(), kind });
        self
    }

    pub fn gate(mut self, id: &str, registers: &[&str], unitary: bool) -> Self {
        self.gates.push(ViewGate {
            id: id.to_string(),
            registers: registers.iter().map(|s| s.to_string()).collect(),
            unitary,
        });
        self
    }

    pub fn wire_kind(&self, register: &str) -> Option<WireKind> {
        self.wires.iter().find(|w| w.register == register).map(|w| w.kind)
    }

    pub fn has_gate(&self, id: &str) -> bool {
        self.gates.iter().any(|g| g.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for w in &self.wires {
            if !names.insert(w.register.as_str()) {
                return Err(CircuitError::InvalidSpec(format!("view of {} repeats wire `{}`", self.agent, w.register)));
            }
        }
        for g in &self.gates {
            for r in &g.registers {
                if !names.contains(r.as_str()) {
                    return Err(CircuitError::InvalidSpec(format!(
                        "gate `{}` in view of {} acts on undeclared wire `{r}`",
                        g.id, self.agent
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Columns taken by a name, not counting combining marks (`B̄` is one).
fn display_width(s: &str) -> usize {
    s.chars().filter(|c| !('\u{0300}'..='\u{036f}').contains(c)).count()
}

/// Fixed-width text diagram: one line per wire, `-` for quantum and `=` for
/// classical wires, `[id]` for unitary and `(id)` for non-unitary boxes.
pub fn render_view(view: &CircuitView) -> String {
    if view.wires.is_empty() {
        return String::new();
    }
    let name_w = view.wires.iter().map(|w| display_width(&w.register)).max().unwrap_or(0);
    let mut out = String::new();
    for wire in &view.wires {
        let fill = match wire.kind {
            WireKind::Quantum => '-',
            WireKind::Classical => '=',
        };
        let mut line = wire.register.clone();
        line.extend(std::iter::repeat_n(' ', name_w - display_width(&wire.register) + 1));
        line.extend(std::iter::repeat_n(fill, 2));
        for g in &view.gates {
            let width = g.id.chars().count() + 2;
            if g.registers.iter().any(|r| r == &wire.register) {
                let (l, r) = if g.unitary { ('[', ']') } else { ('(', ')') };
                let _ = write!(line, "{l}{}{r}", g.id);
            } else {
                line.extend(std::iter::repeat_n(fill, width));
            }
            line.extend(std::iter::repeat_n(fill, 2));
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Largest amplitude difference between the two sequences applied to a few
/// fixed probe states whose entries all have modulus one and pseudo-random
/// phases. Distinct unitaries agree on such a probe only on a null set.
fn sequence_deviation(a: &[LinearOp], b: &[LinearOp], registers: &[RegisterSpec]) -> Result<f64> {
    const PROBES: u64 = 3;
    let dim: usize = registers.iter().map(RegisterSpec::dim).product();
    let mut rng = ChaCha20Rng::seed_from_u64(0x5eed_9a7e);
    let mut dev = 0.0f64;
    for _ in 0..PROBES {
        let amps: Vec<Complex64> =
            (0..dim).map(|_| Complex64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU))).collect();
        let probe = StateVector::unnormalized(registers.to_vec(), amps)?;
        let ya = probe.apply_all(a)?;
        let yb = probe.apply_all(b)?;
        let d = ya.amplitudes().iter().zip(yb.amplitudes()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        dev = dev.max(d);
    }
    Ok(dev)
}

/// Checks that every pair of views composes its shared gates into the same
/// unitary. `resolve` maps a gate id to its physical (global) operation.
pub fn check_shared_gates<F>(views: &[CircuitView], resolve: F, registers: &[RegisterSpec]) -> Result<()>
where
    F: Fn(&str) -> Option<LinearOp>,
{
    for (i, a) in views.iter().enumerate() {
        for b in &views[i + 1..] {
            let shared: BTreeSet<&str> = a
                .gates
                .iter()
                .map(|g| g.id.as_str())
                .filter(|id| b.has_gate(id))
                .collect();
            if shared.is_empty() {
                continue;
            }
            let seq = |v: &CircuitView| -> Result<Vec<LinearOp>> {
                v.gates
                    .iter()
                    .filter(|g| shared.contains(g.id.as_str()))
                    .map(|g| {
                        resolve(&g.id).ok_or_else(|| CircuitError::InvalidSpec(format!("unknown gate id `{}`", g.id)))
                    })
                    .collect()
            };
            let ops_a = seq(a)?;
            let ops_b = seq(b)?;
            let touched: BTreeSet<&str> = ops_a.iter().flat_map(|o| o.targets().iter().map(String::as_str)).collect();
            let regs: Vec<RegisterSpec> = registers.iter().filter(|r| touched.contains(r.name())).cloned().collect();
            let dev = sequence_deviation(&ops_a, &ops_b, &regs)?;
            if dev > ALGEBRA_TOL {
                return Err(CircuitError::ViewMismatch(format!(
                    "views of {} and {} differ by {dev:.3e} on shared gates {shared:?}",
                    a.agent, b.agent
                )));
            }
        }
    }
    Ok(())
}
