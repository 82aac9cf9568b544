//! Dense pure-state linear algebra over named registers.
//!
//! A [`StateVector`] holds one amplitude per joint basis state. Joint indices
//! use mixed-radix encoding with the first listed register as the most
//! significant digit. Every operation addresses registers by name; the
//! position of a register in the list only matters for the raw amplitude
//! layout.

use std::collections::HashSet;
use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for algebraic identities (norms, unitarity, overlaps).
pub const ALGEBRA_TOL: f64 = 1e-10;
/// Tolerance for probability distributions summing to one.
pub const SUM_TOL: f64 = 1e-9;
/// Probabilities below this are treated as exactly zero.
pub const ZERO_PROB: f64 = 1e-12;
/// Upper bound on the global Hilbert space dimension.
pub const MAX_DIMENSION: usize = 1 << 20;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HilbertError {
    #[error("duplicate register `{0}`")]
    DuplicateRegister(String),
    #[error("unknown register `{0}`")]
    UnknownRegister(String),
    #[error("register `{register}` has no basis label `{label}`")]
    UnknownLabel { register: String, label: String },
    #[error("invalid register: {0}")]
    InvalidRegister(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid operator: {0}")]
    InvalidOperator(String),
    #[error("state is not normalized (norm = {0})")]
    NotNormalized(f64),
    #[error("measurement basis is not orthonormal: {0}")]
    NonOrthonormalBasis(String),
    #[error("measurement basis is incomplete and declares no catch-all outcome")]
    IncompleteBasis,
    #[error("outcome `{0}` has zero probability")]
    ImpossibleOutcome(String),
    #[error("unknown outcome `{0}`")]
    UnknownOutcome(String),
    #[error("global dimension {0} exceeds the limit of 2^20")]
    DimensionLimit(usize),
}

pub type Result<T> = std::result::Result<T, HilbertError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    Memory,
    Environment,
    Notebook,
    Record,
}

/// A named subsystem with one human-readable label per basis index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegisterSpec {
    name: String,
    role: Role,
    labels: Vec<String>,
}

impl RegisterSpec {
    pub fn new<S: Into<String>>(name: impl Into<String>, role: Role, labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let name = name.into();
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if name.is_empty() {
            return Err(HilbertError::InvalidRegister("empty register name".into()));
        }
        if labels.len() < 2 {
            return Err(HilbertError::InvalidRegister(format!(
                "register `{name}` needs dimension >= 2, got {}",
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(HilbertError::InvalidRegister(format!("register `{name}` repeats label `{l}`")));
            }
        }
        Ok(Self { name, role, labels })
    }

    /// A register whose basis labels are `0..dim`.
    pub fn numbered(name: impl Into<String>, role: Role, dim: usize) -> Result<Self> {
        Self::new(name, role, (0..dim).map(|i| i.to_string()))
    }

    pub fn qubit(name: impl Into<String>, role: Role) -> Self {
        Self::numbered(name, role, 2).expect("qubit register is valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels.iter().position(|l| l == label).ok_or_else(|| HilbertError::UnknownLabel {
            register: self.name.clone(),
            label: label.to_string(),
        })
    }
}

fn check_unique<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(HilbertError::DuplicateRegister(n.to_string()));
        }
    }
    Ok(())
}

fn total_dim(registers: &[RegisterSpec]) -> Result<usize> {
    let mut d: usize = 1;
    for r in registers {
        d = d.checked_mul(r.dim()).filter(|d| *d <= MAX_DIMENSION).ok_or(HilbertError::DimensionLimit(usize::MAX))?;
    }
    Ok(d)
}

/// Index bookkeeping for acting on a subset of registers of a state.
struct Layout {
    /// Offset of each local (target) index within the global index.
    offsets: Vec<usize>,
    /// Global indices whose target digits are all zero.
    bases: Vec<usize>,
}

impl Layout {
    fn new(registers: &[RegisterSpec], positions: &[usize]) -> Self {
        let n = registers.len();
        let mut strides = vec![1usize; n];
        for i in (0..n.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * registers[i + 1].dim();
        }
        let local_dims: Vec<usize> = positions.iter().map(|&p| registers[p].dim()).collect();
        let local_total: usize = local_dims.iter().product();
        let mut offsets = Vec::with_capacity(local_total);
        for l in 0..local_total {
            let mut rem = l;
            let mut off = 0;
            for (k, &p) in positions.iter().enumerate().rev() {
                let d = local_dims[k];
                off += (rem % d) * strides[p];
                rem /= d;
            }
            offsets.push(off);
        }
        let total: usize = registers.iter().map(RegisterSpec::dim).product();
        let bases = (0..total)
            .filter(|&g| positions.iter().all(|&p| (g / strides[p]).is_multiple_of(registers[p].dim())))
            .collect();
        Self { offsets, bases }
    }
}

/// Global pure state over an ordered list of registers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    registers: Vec<RegisterSpec>,
    amplitudes: Vec<Complex64>,
}

impl StateVector {
    /// Builds a normalized state; fails if the norm deviates from one.
    pub fn new(registers: Vec<RegisterSpec>, amplitudes: Vec<Complex64>) -> Result<Self> {
        let s = Self::unnormalized(registers, amplitudes)?;
        let norm = s.norm();
        if (norm - 1.0).abs() > ALGEBRA_TOL {
            return Err(HilbertError::NotNormalized(norm));
        }
        Ok(s)
    }

    /// Builds a vector without the normalization check (projections, fragments).
    pub fn unnormalized(registers: Vec<RegisterSpec>, amplitudes: Vec<Complex64>) -> Result<Self> {
        check_unique(registers.iter().map(RegisterSpec::name))?;
        let dim = total_dim(&registers)?;
        if amplitudes.len() != dim {
            return Err(HilbertError::Shape(format!(
                "expected {dim} amplitudes, got {}",
                amplitudes.len()
            )));
        }
        Ok(Self { registers, amplitudes })
    }

    /// Normalizes an arbitrary nonzero vector.
    pub fn normalized(registers: Vec<RegisterSpec>, amplitudes: Vec<Complex64>) -> Result<Self> {
        let mut s = Self::unnormalized(registers, amplitudes)?;
        let norm = s.norm();
        if norm < ALGEBRA_TOL {
            return Err(HilbertError::NotNormalized(norm));
        }
        s.scale(Complex64::new(1.0 / norm, 0.0));
        Ok(s)
    }

    pub fn basis_index(register: RegisterSpec, index: usize) -> Result<Self> {
        if index >= register.dim() {
            return Err(HilbertError::Shape(format!(
                "index {index} out of range for register `{}`",
                register.name()
            )));
        }
        let mut amps = vec![ZERO; register.dim()];
        amps[index] = ONE;
        Self::new(vec![register], amps)
    }

    pub fn basis(register: RegisterSpec, label: &str) -> Result<Self> {
        let i = register.index_of(label)?;
        Self::basis_index(register, i)
    }

    /// Real-amplitude single-register state, normalized on construction.
    pub fn from_real(register: RegisterSpec, amps: &[f64]) -> Result<Self> {
        Self::new(vec![register], amps.iter().map(|&a| Complex64::new(a, 0.0)).collect())
    }

    /// `(|0⟩ + |1⟩)/√2` on a qubit-sized register.
    pub fn plus(register: RegisterSpec) -> Result<Self> {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        Self::from_real(register, &[h, h])
    }

    pub fn minus(register: RegisterSpec) -> Result<Self> {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        Self::from_real(register, &[h, -h])
    }

    /// Kronecker product in the concatenated register order.
    pub fn tensor(states: &[StateVector]) -> Result<Self> {
        let registers: Vec<RegisterSpec> = states.iter().flat_map(|s| s.registers.iter().cloned()).collect();
        check_unique(registers.iter().map(RegisterSpec::name))?;
        total_dim(&registers)?;
        let mut amps = vec![ONE];
        for s in states {
            let mut next = Vec::with_capacity(amps.len() * s.amplitudes.len());
            for a in &amps {
                for b in &s.amplitudes {
                    next.push(a * b);
                }
            }
            amps = next;
        }
        Ok(Self { registers, amplitudes: amps })
    }

    pub fn tensor_with(&self, other: &StateVector) -> Result<Self> {
        Self::tensor(&[self.clone(), other.clone()])
    }

    pub fn registers(&self) -> &[RegisterSpec] {
        &self.registers
    }

    pub fn register_names(&self) -> Vec<&str> {
        self.registers.iter().map(RegisterSpec::name).collect()
    }

    pub fn register(&self, name: &str) -> Result<&RegisterSpec> {
        self.registers
            .iter()
            .find(|r| r.name() == name)
            .ok_or_else(|| HilbertError::UnknownRegister(name.to_string()))
    }

    pub fn has_register(&self, name: &str) -> bool {
        self.registers.iter().any(|r| r.name() == name)
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(Complex64::norm_sqr).sum::<f64>().sqrt()
    }

    pub fn is_normalized(&self) -> bool {
        (self.norm() - 1.0).abs() <= ALGEBRA_TOL
    }

    fn scale(&mut self, factor: Complex64) {
        for a in &mut self.amplitudes {
            *a *= factor;
        }
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.registers
            .iter()
            .position(|r| r.name() == name)
            .ok_or_else(|| HilbertError::UnknownRegister(name.to_string()))
    }

    fn positions(&self, names: &[String]) -> Result<Vec<usize>> {
        check_unique(names.iter().map(String::as_str))?;
        names.iter().map(|n| self.position(n)).collect()
    }

    /// Amplitude of the joint basis state given as `(register, label)` pairs
    /// covering every register.
    pub fn amplitude(&self, labels: &[(&str, &str)]) -> Result<Complex64> {
        if labels.len() != self.registers.len() {
            return Err(HilbertError::Shape("amplitude lookup must name every register".into()));
        }
        let mut index = 0;
        for reg in &self.registers {
            let (_, label) = labels
                .iter()
                .find(|(n, _)| *n == reg.name())
                .ok_or_else(|| HilbertError::UnknownRegister(reg.name().to_string()))?;
            index = index * reg.dim() + reg.index_of(label)?;
        }
        Ok(self.amplitudes[index])
    }

    /// ⟨self|other⟩ with `self` conjugated.
    pub fn inner_product(&self, other: &StateVector) -> Result<Complex64> {
        if self.registers != other.registers {
            return Err(HilbertError::Shape(format!(
                "register lists differ: {:?} vs {:?}",
                self.register_names(),
                other.register_names()
            )));
        }
        Ok(self.amplitudes.iter().zip(&other.amplitudes).map(|(a, b)| a.conj() * b).sum())
    }

    /// Inner product after bringing `other` into this state's register order.
    pub fn overlap(&self, other: &StateVector) -> Result<Complex64> {
        let order: Vec<&str> = self.register_names();
        self.inner_product(&other.permuted(&order)?)
    }

    /// Reorders registers; amplitudes follow the index permutation.
    pub fn permuted(&self, order: &[&str]) -> Result<StateVector> {
        if order.len() != self.registers.len() {
            return Err(HilbertError::Shape("permutation must list every register".into()));
        }
        let names: Vec<String> = order.iter().map(|s| s.to_string()).collect();
        let positions = self.positions(&names)?;
        let registers: Vec<RegisterSpec> = positions.iter().map(|&p| self.registers[p].clone()).collect();
        let layout = Layout::new(&self.registers, &positions);
        // With every register targeted there is exactly one base (index 0) and
        // `offsets[l]` is the old index of new index `l`.
        let amplitudes = layout.offsets.iter().map(|&old| self.amplitudes[old]).collect();
        Ok(StateVector { registers, amplitudes })
    }

    /// Applies a unitary or isometry to its target registers.
    pub fn apply(&self, op: &LinearOp) -> Result<StateVector> {
        let positions = self.positions(&op.targets)?;
        let in_dim: usize = positions.iter().map(|&p| self.registers[p].dim()).product();
        if in_dim != op.matrix.ncols() {
            return Err(HilbertError::Shape(format!(
                "operator expects input dimension {}, targets {:?} have {in_dim}",
                op.matrix.ncols(),
                op.targets
            )));
        }
        for f in &op.fresh {
            if self.has_register(f.name()) {
                return Err(HilbertError::DuplicateRegister(f.name().to_string()));
            }
        }
        let (base_state, positions) = if op.fresh.is_empty() {
            (self.clone(), positions)
        } else {
            let fresh: Vec<StateVector> = op
                .fresh
                .iter()
                .map(|r| StateVector::basis_index(r.clone(), 0))
                .collect::<Result<_>>()?;
            let mut parts = vec![self.clone()];
            parts.extend(fresh);
            let expanded = StateVector::tensor(&parts)?;
            let mut pos = positions;
            let n = self.registers.len();
            pos.extend(n..n + op.fresh.len());
            (expanded, pos)
        };
        let out_dim: usize = positions.iter().map(|&p| base_state.registers[p].dim()).product();
        if out_dim != op.matrix.nrows() {
            return Err(HilbertError::Shape(format!(
                "operator output dimension {} does not match {out_dim}",
                op.matrix.nrows()
            )));
        }
        let fresh_dim = out_dim / in_dim;
        let layout = Layout::new(&base_state.registers, &positions);
        let mut out = base_state.amplitudes.clone();
        let mut input = vec![ZERO; in_dim];
        for &base in &layout.bases {
            // fresh registers are the trailing digits, so input index i sits at local i * fresh_dim
            for (i, slot) in input.iter_mut().enumerate() {
                *slot = base_state.amplitudes[base + layout.offsets[i * fresh_dim]];
            }
            for r in 0..out_dim {
                let mut acc = ZERO;
                for (c, v) in input.iter().enumerate() {
                    acc += op.matrix[(r, c)] * v;
                }
                out[base + layout.offsets[r]] = acc;
            }
        }
        Ok(StateVector { registers: base_state.registers, amplitudes: out })
    }

    /// Applies a sequence of operators left to right.
    pub fn apply_all<'a>(&self, ops: impl IntoIterator<Item = &'a LinearOp>) -> Result<StateVector> {
        let mut s = self.clone();
        for op in ops {
            s = s.apply(op)?;
        }
        Ok(s)
    }

    /// Drops a register known to be in a product basis state `index`.
    pub fn discard_basis(&self, name: &str, index: usize) -> Result<StateVector> {
        let p = self.position(name)?;
        let reg = &self.registers[p];
        let amp_elsewhere = self.project_register(name, &[index], true)?;
        if amp_elsewhere.norm() > ALGEBRA_TOL {
            return Err(HilbertError::Shape(format!(
                "register `{}` is not in basis state {index}",
                reg.name()
            )));
        }
        let mut registers = self.registers.clone();
        registers.remove(p);
        let layout = Layout::new(&self.registers, &[p]);
        let off = layout.offsets[index];
        let amplitudes = layout.bases.iter().map(|&b| self.amplitudes[b + off]).collect();
        StateVector::unnormalized(registers, amplitudes)
    }

    /// Keeps (or with `complement`, removes) the given basis indices of one
    /// register. The result is not renormalized.
    pub fn project_register(&self, name: &str, indices: &[usize], complement: bool) -> Result<StateVector> {
        let p = self.position(name)?;
        let dim = self.registers[p].dim();
        let mut keep = vec![complement; dim];
        for &i in indices {
            if i >= dim {
                return Err(HilbertError::Shape(format!("index {i} out of range for `{name}`")));
            }
            keep[i] = !complement;
        }
        let layout = Layout::new(&self.registers, &[p]);
        let mut out = self.amplitudes.clone();
        for &base in &layout.bases {
            for (i, &off) in layout.offsets.iter().enumerate() {
                if !keep[i] {
                    out[base + off] = ZERO;
                }
            }
        }
        Ok(StateVector { registers: self.registers.clone(), amplitudes: out })
    }

    /// Probability of each basis index of one register.
    pub fn register_distribution(&self, name: &str) -> Result<Vec<f64>> {
        let p = self.position(name)?;
        let layout = Layout::new(&self.registers, &[p]);
        let mut probs = vec![0.0; self.registers[p].dim()];
        for &base in &layout.bases {
            for (i, &off) in layout.offsets.iter().enumerate() {
                probs[i] += self.amplitudes[base + off].norm_sqr();
            }
        }
        Ok(probs)
    }

    /// Schmidt rank across the cut `part | rest`, counting singular values above `tol`.
    pub fn schmidt_rank(&self, part: &[&str], tol: f64) -> Result<usize> {
        let names: Vec<String> = part.iter().map(|s| s.to_string()).collect();
        let positions = self.positions(&names)?;
        let layout = Layout::new(&self.registers, &positions);
        let rows = layout.offsets.len();
        let cols = layout.bases.len();
        let m = DMatrix::from_fn(rows, cols, |r, c| self.amplitudes[layout.bases[c] + layout.offsets[r]]);
        let sv = m.svd(false, false).singular_values;
        Ok(sv.iter().filter(|s| **s > tol).count())
    }

    /// Replaces the amplitudes (same registers). Used by the collapse kernel.
    fn with_amplitudes(&self, amplitudes: Vec<Complex64>) -> StateVector {
        StateVector { registers: self.registers.clone(), amplitudes }
    }
}

impl fmt::Display for StateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        let dims: Vec<usize> = self.registers.iter().map(RegisterSpec::dim).collect();
        for (g, a) in self.amplitudes.iter().enumerate() {
            if a.norm() < ALGEBRA_TOL {
                continue;
            }
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            let mut rem = g;
            let mut digits = vec![0; dims.len()];
            for k in (0..dims.len()).rev() {
                digits[k] = rem % dims[k];
                rem /= dims[k];
            }
            write!(f, "({:.6}{:+.6}i)", a.re, a.im)?;
            for (reg, d) in self.registers.iter().zip(digits) {
                write!(f, "|{}⟩_{}", reg.labels[d], reg.name())?;
            }
        }
        if first {
            write!(f, "0")?;
        }
        Ok(())
    }
}

/// Unitary on existing registers, or isometry appending fresh registers.
///
/// For an isometry the output local index is `(targets..., fresh...)` with the
/// fresh registers as the least significant digits; fresh registers start in
/// basis index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOp {
    targets: Vec<String>,
    fresh: Vec<RegisterSpec>,
    matrix: DMatrix<Complex64>,
}

fn max_deviation_from_identity(m: &DMatrix<Complex64>) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            let expect = if r == c { ONE } else { ZERO };
            worst = worst.max((m[(r, c)] - expect).norm());
        }
    }
    worst
}

impl LinearOp {
    pub fn unitary(targets: Vec<String>, matrix: DMatrix<Complex64>) -> Result<Self> {
        check_unique(targets.iter().map(String::as_str))?;
        if matrix.nrows() != matrix.ncols() {
            return Err(HilbertError::InvalidOperator(format!(
                "unitary must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let dev = max_deviation_from_identity(&(matrix.adjoint() * &matrix))
            .max(max_deviation_from_identity(&(&matrix * matrix.adjoint())));
        if dev > ALGEBRA_TOL {
            return Err(HilbertError::InvalidOperator(format!("matrix is not unitary (deviation {dev:.3e})")));
        }
        Ok(Self { targets, fresh: Vec::new(), matrix })
    }

    pub fn isometry(targets: Vec<String>, fresh: Vec<RegisterSpec>, matrix: DMatrix<Complex64>) -> Result<Self> {
        check_unique(targets.iter().map(String::as_str).chain(fresh.iter().map(RegisterSpec::name)))?;
        let fresh_dim: usize = fresh.iter().map(RegisterSpec::dim).product();
        if matrix.nrows() != matrix.ncols() * fresh_dim {
            return Err(HilbertError::InvalidOperator(format!(
                "isometry must be {}x{}, got {}x{}",
                matrix.ncols() * fresh_dim,
                matrix.ncols(),
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let dev = max_deviation_from_identity(&(matrix.adjoint() * &matrix));
        if dev > ALGEBRA_TOL {
            return Err(HilbertError::InvalidOperator(format!("V†V deviates from identity by {dev:.3e}")));
        }
        Ok(Self { targets, fresh, matrix })
    }

    /// Single-register unitary from a row-major real matrix.
    pub fn real_gate(target: &str, rows: &[&[f64]]) -> Result<Self> {
        let n = rows.len();
        let m = DMatrix::from_fn(n, n, |r, c| Complex64::new(rows[r][c], 0.0));
        Self::unitary(vec![target.to_string()], m)
    }

    pub fn hadamard(target: &str) -> Self {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        Self::real_gate(target, &[&[h, h], &[h, -h]]).expect("hadamard is unitary")
    }

    pub fn pauli_x(target: &str) -> Self {
        Self::real_gate(target, &[&[0.0, 1.0], &[1.0, 0.0]]).expect("X is unitary")
    }

    /// CNOT with `control` as the most significant target digit.
    pub fn cnot(control: &str, target: &str) -> Self {
        let mut m = DMatrix::zeros(4, 4);
        m[(0, 0)] = ONE;
        m[(1, 1)] = ONE;
        m[(2, 3)] = ONE;
        m[(3, 2)] = ONE;
        Self::unitary(vec![control.to_string(), target.to_string()], m).expect("CNOT is unitary")
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn fresh(&self) -> &[RegisterSpec] {
        &self.fresh
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    pub fn is_unitary(&self) -> bool {
        self.fresh.is_empty()
    }

    /// Inverse of a unitary.
    pub fn adjoint(&self) -> Result<Self> {
        if !self.is_unitary() {
            return Err(HilbertError::InvalidOperator("only unitaries have an inverse".into()));
        }
        Ok(Self { targets: self.targets.clone(), fresh: Vec::new(), matrix: self.matrix.adjoint() })
    }

    /// Full matrix of this unitary on the given register list (first listed
    /// register most significant).
    pub fn embed(&self, registers: &[RegisterSpec]) -> Result<DMatrix<Complex64>> {
        if !self.is_unitary() {
            return Err(HilbertError::InvalidOperator("only unitaries can be embedded".into()));
        }
        let dim = total_dim(registers)?;
        let mut out = DMatrix::zeros(dim, dim);
        for c in 0..dim {
            let mut amps = vec![ZERO; dim];
            amps[c] = ONE;
            let col = StateVector::unnormalized(registers.to_vec(), amps)?.apply(self)?;
            for (r, a) in col.amplitudes.iter().enumerate() {
                out[(r, c)] = *a;
            }
        }
        Ok(out)
    }

    /// Commutes with the projector onto each basis index of `register`
    /// (i.e. leaves a record held there undisturbed).
    pub fn preserves_register_basis(&self, register: &str, dims: &[usize]) -> bool {
        let Some(pos) = self.targets.iter().position(|t| t == register) else {
            return true;
        };
        if !self.is_unitary() {
            return false;
        }
        let n = self.matrix.nrows();
        let stride: usize = dims[pos + 1..].iter().product();
        let d = dims[pos];
        for r in 0..n {
            for c in 0..n {
                if (r / stride) % d != (c / stride) % d && self.matrix[(r, c)].norm() > ALGEBRA_TOL {
                    return false;
                }
            }
        }
        true
    }
}

/// Projective measurement given by orthonormal fragments on the target
/// registers, optionally completed by a catch-all outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSpec {
    targets: Vec<String>,
    basis: Vec<StateVector>,
    labels: Vec<String>,
    catch_all: Option<String>,
    record: Option<String>,
}

impl MeasurementSpec {
    pub fn new(basis: Vec<StateVector>, labels: Vec<String>, catch_all: Option<String>) -> Result<Self> {
        let first = basis
            .first()
            .ok_or_else(|| HilbertError::Shape("measurement needs at least one basis vector".into()))?;
        let targets: Vec<String> = first.register_names().into_iter().map(String::from).collect();
        if labels.len() != basis.len() {
            return Err(HilbertError::Shape(format!(
                "{} labels for {} basis vectors",
                labels.len(),
                basis.len()
            )));
        }
        let mut seen = HashSet::new();
        for l in labels.iter().chain(catch_all.iter()) {
            if !seen.insert(l.as_str()) {
                return Err(HilbertError::Shape(format!("duplicate outcome label `{l}`")));
            }
        }
        for (i, b) in basis.iter().enumerate() {
            if b.registers() != first.registers() {
                return Err(HilbertError::Shape("basis fragments must share one register list".into()));
            }
            for (j, c) in basis.iter().enumerate().skip(i) {
                let ip = b.inner_product(c)?;
                let expect = if i == j { 1.0 } else { 0.0 };
                if (ip - Complex64::new(expect, 0.0)).norm() > ALGEBRA_TOL {
                    return Err(HilbertError::NonOrthonormalBasis(format!(
                        "⟨{}|{}⟩ = {ip}",
                        labels[i], labels[j]
                    )));
                }
            }
        }
        let complete = basis.len() == first.dim();
        if !complete && catch_all.is_none() {
            return Err(HilbertError::IncompleteBasis);
        }
        if basis.len() + usize::from(catch_all.is_some()) < 2 {
            return Err(HilbertError::Shape("measurement needs at least two outcomes".into()));
        }
        Ok(Self { targets, basis, labels, catch_all, record: None })
    }

    /// Computational-basis measurement of one register, outcome labels taken
    /// from the register's basis labels.
    pub fn computational(register: &RegisterSpec) -> Self {
        let basis = (0..register.dim())
            .map(|i| StateVector::basis_index(register.clone(), i).expect("index in range"))
            .collect();
        Self::new(basis, register.labels().to_vec(), None).expect("computational basis is complete")
    }

    pub fn with_record(mut self, record: impl Into<String>) -> Self {
        self.record = Some(record.into());
        self
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn basis(&self) -> &[StateVector] {
        &self.basis
    }

    pub fn record(&self) -> Option<&str> {
        self.record.as_deref()
    }

    pub fn catch_all(&self) -> Option<&str> {
        self.catch_all.as_deref()
    }

    /// Every outcome label, catch-all last.
    pub fn outcome_labels(&self) -> Vec<String> {
        self.labels.iter().cloned().chain(self.catch_all.iter().cloned()).collect()
    }

    pub fn target_registers(&self) -> &[RegisterSpec] {
        self.basis[0].registers()
    }

    fn check_against(&self, state: &StateVector) -> Result<Vec<usize>> {
        let positions = state.positions(&self.targets)?;
        for (&p, expected) in positions.iter().zip(self.target_registers()) {
            if state.registers[p].dim() != expected.dim() {
                return Err(HilbertError::Shape(format!(
                    "register `{}` has dimension {} but the measurement expects {}",
                    expected.name(),
                    state.registers[p].dim(),
                    expected.dim()
                )));
            }
        }
        Ok(positions)
    }

    /// Squared overlap ⟨b_k|v⟩ for each fragment, plus the local norm.
    fn local_weights(&self, v: &[Complex64]) -> (Vec<Complex64>, f64) {
        let coeffs = self
            .basis
            .iter()
            .map(|b| b.amplitudes.iter().zip(v).map(|(x, y)| x.conj() * y).sum())
            .collect();
        (coeffs, v.iter().map(Complex64::norm_sqr).sum())
    }

    fn outcome_index(&self, label: &str) -> Result<usize> {
        self.outcome_labels()
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| HilbertError::UnknownOutcome(label.to_string()))
    }

    /// Unitary dilation: an isometry appending a record register whose
    /// basis index is the outcome index.
    pub fn dilation(&self, record: RegisterSpec) -> Result<LinearOp> {
        let outcomes = self.outcome_labels();
        if record.dim() != outcomes.len() {
            return Err(HilbertError::Shape(format!(
                "record register `{}` has dimension {} but the measurement has {} outcomes",
                record.name(),
                record.dim(),
                outcomes.len()
            )));
        }
        let d = self.basis[0].dim();
        let n = outcomes.len();
        let mut projectors: Vec<DMatrix<Complex64>> = self
            .basis
            .iter()
            .map(|b| {
                let col = nalgebra::DVector::from_column_slice(&b.amplitudes);
                &col * col.adjoint()
            })
            .collect();
        if self.catch_all.is_some() {
            let sum = projectors.iter().fold(DMatrix::zeros(d, d), |acc, p| acc + p);
            projectors.push(DMatrix::identity(d, d) - sum);
        }
        let m = DMatrix::from_fn(d * n, d, |row, col| projectors[row % n][(row / n, col)]);
        LinearOp::isometry(self.targets.clone(), vec![record], m)
    }

    /// Unitary form of the dilation acting on an existing record register:
    /// `Σ_k P_k ⊗ X^k`, where `X` shifts the record by one. On a record in
    /// basis index 0 it agrees with [`MeasurementSpec::dilation`].
    pub fn record_unitary(&self, record: &RegisterSpec) -> Result<LinearOp> {
        let isometry = self.dilation(record.clone())?;
        let d = self.basis[0].dim();
        let n = record.dim();
        let v = isometry.matrix();
        // column (j, r) of the unitary: Σ_k P_k|j⟩ ⊗ |k + r mod n⟩
        let m = DMatrix::from_fn(d * n, d * n, |row, col| {
            let (i, out) = (row / n, row % n);
            let (j, r) = (col / n, col % n);
            let k = (out + n - r) % n;
            v[(i * n + k, j)]
        });
        let mut targets = self.targets.clone();
        targets.push(record.name().to_string());
        LinearOp::unitary(targets, m)
    }

    /// Record register suitable for [`MeasurementSpec::dilation`].
    pub fn record_register(&self, name: &str) -> Result<RegisterSpec> {
        RegisterSpec::new(name, Role::Record, self.outcome_labels())
    }
}

/// Outcome label → probability, in the measurement's outcome order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution(pub Vec<(String, f64)>);

impl Distribution {
    pub fn get(&self, label: &str) -> f64 {
        self.0.iter().find(|(l, _)| l == label).map_or(0.0, |(_, p)| *p)
    }

    pub fn total(&self) -> f64 {
        self.0.iter().map(|(_, p)| p).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(l, p)| (l.as_str(), *p))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Born-rule outcome probabilities (squared projection norms).
pub fn outcome_distribution(state: &StateVector, m: &MeasurementSpec) -> Result<Distribution> {
    let positions = m.check_against(state)?;
    let layout = Layout::new(&state.registers, &positions);
    let mut probs = vec![0.0; m.basis.len()];
    let mut rest = 0.0;
    let mut local = vec![ZERO; layout.offsets.len()];
    for &base in &layout.bases {
        for (slot, &off) in local.iter_mut().zip(&layout.offsets) {
            *slot = state.amplitudes[base + off];
        }
        let (coeffs, norm) = m.local_weights(&local);
        let mut captured = 0.0;
        for (p, c) in probs.iter_mut().zip(&coeffs) {
            *p += c.norm_sqr();
            captured += c.norm_sqr();
        }
        rest += norm - captured;
    }
    let total = state.norm().powi(2);
    let mut out: Vec<(String, f64)> = m.labels.iter().cloned().zip(probs.into_iter().map(|p| p / total)).collect();
    if let Some(c) = &m.catch_all {
        out.push((c.clone(), (rest / total).max(0.0)));
    }
    Ok(Distribution(out))
}

/// Unnormalized projection of `state` onto outcome `label`.
pub fn project(state: &StateVector, m: &MeasurementSpec, label: &str) -> Result<StateVector> {
    let k = m.outcome_index(label)?;
    let positions = m.check_against(state)?;
    let layout = Layout::new(&state.registers, &positions);
    let mut out = state.amplitudes.clone();
    let mut local = vec![ZERO; layout.offsets.len()];
    for &base in &layout.bases {
        for (slot, &off) in local.iter_mut().zip(&layout.offsets) {
            *slot = state.amplitudes[base + off];
        }
        let (coeffs, _) = m.local_weights(&local);
        for (l, &off) in layout.offsets.iter().enumerate() {
            let projected = if k < m.basis.len() {
                m.basis[k].amplitudes[l] * coeffs[k]
            } else {
                local[l] - m.basis.iter().zip(&coeffs).map(|(b, c)| b.amplitudes[l] * c).sum::<Complex64>()
            };
            out[base + off] = projected;
        }
    }
    Ok(state.with_amplitudes(out))
}

/// Conditions `state` on outcome `label`: returns its probability and the
/// renormalized post-measurement state.
pub fn postselect(state: &StateVector, m: &MeasurementSpec, label: &str) -> Result<(f64, StateVector)> {
    let projected = project(state, m, label)?;
    let p = projected.norm().powi(2) / state.norm().powi(2);
    if p < ZERO_PROB {
        return Err(HilbertError::ImpossibleOutcome(label.to_string()));
    }
    let post = StateVector::normalized(projected.registers.clone(), projected.amplitudes)?;
    Ok((p, write_record(post, m, label)?))
}

fn write_record(state: StateVector, m: &MeasurementSpec, label: &str) -> Result<StateVector> {
    let Some(name) = &m.record else {
        return Ok(state);
    };
    let k = m.outcome_index(label)?;
    if state.has_register(name) {
        let reg = state.register(name)?.clone();
        let d = reg.dim();
        if k >= d {
            return Err(HilbertError::Shape(format!("record register `{name}` cannot hold outcome {k}")));
        }
        // cyclic shift |j⟩ ↦ |j + k mod d⟩
        let shift = DMatrix::from_fn(d, d, |r, c| if r == (c + k) % d { ONE } else { ZERO });
        state.apply(&LinearOp::unitary(vec![name.clone()], shift)?)
    } else {
        let reg = m.record_register(name)?;
        state.tensor_with(&StateVector::basis_index(reg, k)?)
    }
}

/// Samples an outcome by the Born rule and returns it with the post-measurement state.
pub fn measure_sample<R: Rng + ?Sized>(state: &StateVector, m: &MeasurementSpec, rng: &mut R) -> Result<(String, StateVector)> {
    let dist = outcome_distribution(state, m)?;
    let label = sample_label(&dist, rng);
    let (_, post) = postselect(state, m, &label)?;
    Ok((label, post))
}

/// Draws a label from a distribution; probabilities below [`ZERO_PROB`] are never chosen.
pub fn sample_label<R: Rng + ?Sized>(dist: &Distribution, rng: &mut R) -> String {
    let live: Vec<(&str, f64)> = dist.iter().filter(|(_, p)| *p >= ZERO_PROB).collect();
    let total: f64 = live.iter().map(|(_, p)| p).sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (l, p) in &live {
        acc += p;
        if u < acc {
            return l.to_string();
        }
    }
    live.last().map(|(l, _)| l.to_string()).expect("distribution has a nonzero outcome")
}
