//! Brute-force qubit model of the built-in experiments, written without the
//! library. Each lab is compressed to its system qubit plus a memory qubit
//! holding a copy of the outcome; the environment copy carries no extra
//! information and is dropped. Outside measurements are explicit
//! projectors onto `(|00⟩ ∓ |11⟩)/√2`.

use num_complex::Complex64 as C;

const H: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Qubit 0 is the most significant bit of the index.
#[derive(Debug, Clone)]
pub struct Qubits {
    n: usize,
    amps: Vec<C>,
}

impl Qubits {
    pub fn zero(n: usize) -> Self {
        let mut amps = vec![C::new(0.0, 0.0); 1 << n];
        amps[0] = C::new(1.0, 0.0);
        Self { n, amps }
    }

    fn bit(&self, index: usize, q: usize) -> usize {
        (index >> (self.n - 1 - q)) & 1
    }

    fn mask(&self, q: usize) -> usize {
        1 << (self.n - 1 - q)
    }

    /// Sets qubit `q` (currently |0⟩ everywhere) to `c0|0⟩ + c1|1⟩`.
    pub fn prepare(mut self, q: usize, c0: f64, c1: f64) -> Self {
        let mut out = vec![C::new(0.0, 0.0); self.amps.len()];
        for (i, a) in self.amps.iter().enumerate() {
            if self.bit(i, q) == 0 && a.norm() > 0.0 {
                out[i] += a * c0;
                out[i | self.mask(q)] += a * c1;
            }
        }
        self.amps = out;
        self
    }

    /// 2×2 gate `[[m00, m01], [m10, m11]]` on `q`, applied only where the
    /// optional control bit is 1.
    pub fn gate(mut self, q: usize, m: [[f64; 2]; 2], control: Option<usize>) -> Self {
        let mut out = self.amps.clone();
        let mq = self.mask(q);
        for i in 0..self.amps.len() {
            if self.bit(i, q) == 1 || control.is_some_and(|c| self.bit(i, c) == 0) {
                continue;
            }
            let (a0, a1) = (self.amps[i], self.amps[i | mq]);
            out[i] = a0 * m[0][0] + a1 * m[0][1];
            out[i | mq] = a0 * m[1][0] + a1 * m[1][1];
        }
        self.amps = out;
        self
    }

    pub fn h(self, q: usize) -> Self {
        self.gate(q, [[H, H], [H, -H]], None)
    }

    pub fn ch(self, c: usize, t: usize) -> Self {
        self.gate(t, [[H, H], [H, -H]], Some(c))
    }

    pub fn x(self, q: usize) -> Self {
        self.gate(q, [[0.0, 1.0], [1.0, 0.0]], None)
    }

    pub fn cnot(self, c: usize, t: usize) -> Self {
        self.gate(t, [[0.0, 1.0], [1.0, 0.0]], Some(c))
    }

    pub fn project(mut self, p: Proj) -> Self {
        match p {
            Proj::Bit(q, v) => {
                for i in 0..self.amps.len() {
                    if self.bit(i, q) != v {
                        self.amps[i] = C::new(0.0, 0.0);
                    }
                }
            }
            Proj::Plus(q, sign) => {
                let mq = self.mask(q);
                for i in 0..self.amps.len() {
                    if self.bit(i, q) == 1 {
                        continue;
                    }
                    let c = (self.amps[i] + self.amps[i | mq] * sign) * H;
                    self.amps[i] = c * H;
                    self.amps[i | mq] = c * H * sign;
                }
            }
            Proj::Pair(q1, q2, outcome) => {
                let (m1, m2) = (self.mask(q1), self.mask(q2));
                for i in 0..self.amps.len() {
                    if self.bit(i, q1) == 1 || self.bit(i, q2) == 1 {
                        continue;
                    }
                    let (i00, i01, i10, i11) = (i, i | m2, i | m1, i | m1 | m2);
                    match outcome {
                        Lab::Ok | Lab::Fail => {
                            let s = if outcome == Lab::Ok { -1.0 } else { 1.0 };
                            let c = (self.amps[i00] + self.amps[i11] * s) * H;
                            self.amps[i00] = c * H;
                            self.amps[i11] = c * H * s;
                            self.amps[i01] = C::new(0.0, 0.0);
                            self.amps[i10] = C::new(0.0, 0.0);
                        }
                        Lab::Other => {
                            self.amps[i00] = C::new(0.0, 0.0);
                            self.amps[i11] = C::new(0.0, 0.0);
                        }
                    }
                }
            }
        }
        self
    }

    pub fn weight(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Largest amplitude difference.
    pub fn distance(&self, other: &Qubits) -> f64 {
        self.amps.iter().zip(&other.amps).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    pub fn normalized(mut self) -> Self {
        let w = self.weight().sqrt();
        for a in &mut self.amps {
            *a /= w;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lab {
    Ok,
    Fail,
    Other,
}

impl Lab {
    pub const ALL: [Lab; 3] = [Lab::Ok, Lab::Fail, Lab::Other];

    pub fn label(self) -> &'static str {
        match self {
            Lab::Ok => "ok",
            Lab::Fail => "fail",
            Lab::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Proj {
    /// Computational-basis value of one qubit.
    Bit(usize, usize),
    /// `(|0⟩ ± |1⟩)/√2` on one qubit; the sign is ±1.
    Plus(usize, f64),
    /// ok / fail / other on a compressed two-qubit lab.
    Pair(usize, usize, Lab),
}

/// `P(targets | given)` on `state`.
pub fn conditional(state: &Qubits, target: Proj, given: &[Proj]) -> f64 {
    let conditioned = given.iter().fold(state.clone(), |s, p| s.project(*p));
    let w = conditioned.weight();
    assert!(w > 1e-12, "oracle conditioning on an impossible event");
    conditioned.project(target).weight() / w
}

pub fn joint(state: &Qubits, events: &[Proj]) -> f64 {
    events.iter().fold(state.clone(), |s, p| s.project(*p)).weight()
}

/// Qubit positions in the compressed four-agent model.
pub const R: usize = 0;
pub const A: usize = 1;
pub const S: usize = 2;
pub const B: usize = 3;

pub fn fr_prepared() -> Qubits {
    Qubits::zero(4).prepare(R, (1.0f64 / 3.0).sqrt(), (2.0f64 / 3.0).sqrt())
}

/// After Alice's measurement, her preparation of S and Bob's measurement.
pub fn fr_after_bob() -> Qubits {
    fr_prepared().cnot(R, A).ch(A, S).cnot(S, B)
}

pub fn u(outcome: Lab) -> Proj {
    Proj::Pair(R, A, outcome)
}

pub fn w(outcome: Lab) -> Proj {
    Proj::Pair(S, B, outcome)
}

/// `P(u, w)` when every lab evolves unitarily.
pub fn fr_joint(uo: Lab, wo: Lab) -> f64 {
    joint(&fr_after_bob(), &[u(uo), w(wo)])
}

/// `P(u, w)` when both friends' measurements collapse their labs.
pub fn fr_joint_collapse(uo: Lab, wo: Lab) -> f64 {
    let mut total = 0.0;
    for a in 0..2 {
        let after_a = fr_prepared().cnot(R, A).project(Proj::Bit(A, a));
        let pa = after_a.weight();
        if pa < 1e-15 {
            continue;
        }
        let after_s = after_a.normalized().ch(A, S).cnot(S, B);
        for b in 0..2 {
            let after_b = after_s.clone().project(Proj::Bit(B, b));
            let pb = after_b.weight();
            if pb < 1e-15 {
                continue;
            }
            total += pa * pb * joint(&after_b.normalized(), &[u(uo), w(wo)]);
        }
    }
    total
}

/// Qubit positions in the compressed notebook model.
pub const DR: usize = 0;
pub const DA: usize = 1;
pub const DN: usize = 2;

/// `P(w = +)` after the friend measures, writes an outcome-independent
/// note, and the outside agent reverses the measurement.
pub fn deutsch_plus(collapse: bool) -> f64 {
    let measured = Qubits::zero(3).h(DR).cnot(DR, DA);
    let branches: Vec<(f64, Qubits)> = if collapse {
        (0..2)
            .map(|a| {
                let b = measured.clone().project(Proj::Bit(DA, a));
                (b.weight(), b.normalized())
            })
            .collect()
    } else {
        vec![(1.0, measured)]
    };
    branches
        .into_iter()
        .map(|(p, s)| p * joint(&s.x(DN).cnot(DR, DA), &[Proj::Plus(DR, 1.0)]))
        .sum()
}
