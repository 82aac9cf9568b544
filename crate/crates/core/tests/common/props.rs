//! Randomized property suites run through a deterministic proptest runner.
//! Each returns a one-line summary on success and the failure otherwise.

use std::cell::Cell;

use friendsim::circuit::{CircuitError, CircuitView, WireKind};
use friendsim::harness::{self, Mode, PolicyRef, Report, RunConfig};
use friendsim::hilbert::{outcome_distribution, postselect, LinearOp, MeasurementSpec, RegisterSpec, Role, StateVector};
use friendsim::policies::BUILTIN_POLICIES;
use friendsim::protocols::{
    Action, AgentDecl, ExperimentScript, GateName, Operation, ProtocolError, RegisterDecl, Step, BUILTIN_SCRIPTS,
};
use nalgebra::DMatrix;
use num_complex::Complex64 as C;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn report<T: std::fmt::Debug>(result: Result<(), proptest::test_runner::TestError<T>>, summary: String) -> Result<String, String> {
    result.map(|_| summary).map_err(|e| e.to_string())
}

pub fn registers(dims: &[usize]) -> Vec<RegisterSpec> {
    dims.iter()
        .enumerate()
        .map(|(i, &d)| RegisterSpec::numbered(format!("r{i}"), Role::System, d).unwrap())
        .collect()
}

pub fn random_amplitudes(n: usize, rng: &mut impl Rng) -> Vec<C> {
    (0..n).map(|_| C::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
}

pub fn random_state(regs: &[RegisterSpec], rng: &mut impl Rng) -> StateVector {
    let dim = regs.iter().map(RegisterSpec::dim).product();
    StateVector::normalized(regs.to_vec(), random_amplitudes(dim, rng)).unwrap()
}

/// Q factor of a random complex matrix.
pub fn random_unitary(dim: usize, rng: &mut impl Rng) -> DMatrix<C> {
    DMatrix::from_vec(dim, dim, random_amplitudes(dim * dim, rng)).qr().q()
}

/// A non-empty subset of `0..n` in random order.
pub fn random_targets(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    let k = rng.random_range(1..=n);
    all.truncate(k);
    all
}

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(2usize..=3, 1..=3)
}

/// ‖U ψ‖ = 1 for random states and random unitaries on random targets.
pub fn norm_preservation(cases: u32) -> Result<String, String> {
    let result = runner(cases).run(&(dims_strategy(), any::<u64>()), |(dims, seed)| {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let regs = registers(&dims);
        let state = random_state(&regs, &mut rng);
        let targets = random_targets(regs.len(), &mut rng);
        let d: usize = targets.iter().map(|&t| regs[t].dim()).product();
        let names = targets.iter().map(|&t| regs[t].name().to_string()).collect();
        let op = LinearOp::unitary(names, random_unitary(d, &mut rng)).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let out = state.apply(&op).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!((out.norm() - 1.0).abs() <= 1e-10, "norm {} after {:?}", out.norm(), op.targets());
        Ok(())
    });
    report(result, format!("{cases} cases"))
}

/// The Born distribution of a random (partial) basis measurement equals the
/// distribution read off the record register after its unitary dilation,
/// and the probability of each post-selected branch.
pub fn dilation_collapse_equivalence(cases: u32) -> Result<String, String> {
    let partial = Cell::new(0u32);
    let result = runner(cases).run(&(dims_strategy(), any::<u64>()), |(dims, seed)| {
        let fail = |e: &dyn std::fmt::Display| TestCaseError::fail(e.to_string());
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let regs = registers(&dims);
        let state = random_state(&regs, &mut rng);
        let targets = random_targets(regs.len(), &mut rng);
        let target_regs: Vec<RegisterSpec> = targets.iter().map(|&t| regs[t].clone()).collect();
        let dt: usize = target_regs.iter().map(RegisterSpec::dim).product();
        let k = rng.random_range(1..=dt);
        let u = random_unitary(dt, &mut rng);
        let basis: Vec<StateVector> = (0..k)
            .map(|c| StateVector::normalized(target_regs.clone(), u.column(c).iter().copied().collect()).unwrap())
            .collect();
        let labels: Vec<String> = (0..k).map(|i| format!("o{i}")).collect();
        let catch_all = (k < dt).then(|| "rest".to_string());
        if catch_all.is_some() {
            partial.set(partial.get() + 1);
        }
        let m = MeasurementSpec::new(basis, labels, catch_all).map_err(|e| fail(&e))?;
        let dist = outcome_distribution(&state, &m).map_err(|e| fail(&e))?;
        prop_assert!((dist.total() - 1.0).abs() <= 1e-9);

        let record = m.record_register("rec").map_err(|e| fail(&e))?;
        let dilated = state.apply(&m.dilation(record).map_err(|e| fail(&e))?).map_err(|e| fail(&e))?;
        let read = dilated.register_distribution("rec").map_err(|e| fail(&e))?;
        for ((label, p), q) in dist.iter().zip(&read) {
            prop_assert!((p - q).abs() <= 1e-10, "{label}: born {p} vs dilation {q}");
            if p >= 1e-9 {
                let (pp, post) = postselect(&state, &m, label).map_err(|e| fail(&e))?;
                prop_assert!((pp - p).abs() <= 1e-10, "{label}: collapse {pp} vs born {p}");
                let again = outcome_distribution(&post, &m).map_err(|e| fail(&e))?;
                prop_assert!((again.get(label) - 1.0).abs() <= 1e-9, "{label}: repeat gives {}", again.get(label));
            }
        }
        Ok(())
    });
    report(result, format!("{cases} cases, {} with a catch-all outcome", partial.get()))
}

#[derive(Debug, Clone, Copy)]
struct GateSpec {
    target: usize,
    gate: GateName,
    control: Option<usize>,
}

const QUBITS: usize = 3;

fn gate_matrix(g: GateSpec) -> DMatrix<C> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let m = match g.gate {
        GateName::H => [[h, h], [h, -h]],
        GateName::X => [[0.0, 1.0], [1.0, 0.0]],
        GateName::Z => [[1.0, 0.0], [0.0, -1.0]],
    };
    let dim = 1 << QUBITS;
    let bit = |i: usize, q: usize| (i >> (QUBITS - 1 - q)) & 1;
    DMatrix::from_fn(dim, dim, |r, c| {
        let same_elsewhere = (0..QUBITS).filter(|&q| q != g.target).all(|q| bit(r, q) == bit(c, q));
        if !same_elsewhere {
            return C::new(0.0, 0.0);
        }
        if g.control.is_some_and(|ctl| bit(c, ctl) == 0) {
            return C::new(if r == c { 1.0 } else { 0.0 }, 0.0);
        }
        C::new(m[bit(r, g.target)][bit(c, g.target)], 0.0)
    })
}

fn composed(gates: &[GateSpec], order: &[usize]) -> DMatrix<C> {
    let dim = 1 << QUBITS;
    order.iter().fold(DMatrix::identity(dim, dim), |acc, &i| gate_matrix(gates[i]) * acc)
}

fn view_script(gates: &[GateSpec], views: &[Vec<usize>]) -> ExperimentScript {
    let q = |i: usize| format!("q{i}");
    let id = |i: usize| format!("G{i}");
    let operations = gates
        .iter()
        .enumerate()
        .map(|(i, g)| Operation::Gate {
            id: id(i),
            target: q(g.target),
            gate: g.gate,
            control: g.control.map(q),
            control_label: g.control.map(|_| "1".to_string()),
        })
        .collect();
    let mut agents = vec![AgentDecl { name: "Lab".into(), memory: None, lab: (0..QUBITS).map(q).collect() }];
    agents.extend((0..views.len()).map(|v| AgentDecl { name: format!("V{v}"), memory: None, lab: vec![] }));
    let views = views
        .iter()
        .enumerate()
        .map(|(v, order)| {
            let mut view = CircuitView::new(format!("V{v}"));
            for i in 0..QUBITS {
                view = view.wire(&q(i), WireKind::Quantum);
            }
            for &g in order {
                let mut regs = vec![q(gates[g].target)];
                regs.extend(gates[g].control.map(q));
                let regs: Vec<&str> = regs.iter().map(String::as_str).collect();
                view = view.gate(&id(g), &regs, true);
            }
            view
        })
        .collect();
    ExperimentScript {
        name: "views".into(),
        description: String::new(),
        registers: (0..QUBITS)
            .map(|i| RegisterDecl { name: q(i), role: Role::System, labels: vec!["0".into(), "1".into()], initial: None })
            .collect(),
        agents,
        operations,
        steps: vec![Step { time: 1, actor: "Lab".into(), actions: (0..gates.len()).map(|i| Action::Apply { op: id(i) }).collect() }],
        views,
    }
}

/// Random per-agent views over random gates: the script compiles iff every
/// pair of views composes its shared gates into the same unitary, checked
/// against dense matrices built here.
pub fn shared_gate_consistency(cases: u32) -> Result<String, String> {
    let mismatched = Cell::new(0u32);
    let strategy = (2usize..=5, 2usize..=3, any::<u64>());
    let result = runner(cases).run(&strategy, |(n_gates, n_views, seed)| {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let gates: Vec<GateSpec> = (0..n_gates)
            .map(|_| {
                let target = rng.random_range(0..QUBITS);
                let gate = [GateName::H, GateName::X, GateName::Z][rng.random_range(0..3)];
                let control = Some(rng.random_range(0..QUBITS)).filter(|c| *c != target && rng.random_bool(0.5));
                GateSpec { target, gate, control }
            })
            .collect();
        let views: Vec<Vec<usize>> = (0..n_views)
            .map(|_| {
                let mut order: Vec<usize> = (0..n_gates).filter(|_| rng.random_bool(0.7)).collect();
                order.shuffle(&mut rng);
                order
            })
            .collect();
        let mut expect_ok = true;
        for (i, a) in views.iter().enumerate() {
            for b in &views[i + 1..] {
                let shared_a: Vec<usize> = a.iter().copied().filter(|g| b.contains(g)).collect();
                let shared_b: Vec<usize> = b.iter().copied().filter(|g| a.contains(g)).collect();
                let dev = (composed(&gates, &shared_a) - composed(&gates, &shared_b)).iter().map(|z| z.norm()).fold(0.0, f64::max);
                expect_ok &= dev <= 1e-10;
            }
        }
        let compiled = view_script(&gates, &views).compile();
        match (&compiled, expect_ok) {
            (Ok(_), true) => {}
            (Err(ProtocolError::Circuit(CircuitError::ViewMismatch(_))), false) => mismatched.set(mismatched.get() + 1),
            (Ok(_), false) => return Err(TestCaseError::fail(format!("views {views:?} over {gates:?} differ but compiled"))),
            (Err(e), _) => return Err(TestCaseError::fail(format!("views {views:?} over {gates:?}: {e}"))),
        }
        Ok(())
    });
    let m = mismatched.get();
    if result.is_ok() && (m == 0 || m == cases) {
        return Err(format!("degenerate sample: {m} of {cases} cases mismatched"));
    }
    report(result, format!("{cases} cases, {m} with mismatched views"))
}

pub fn config_strategy() -> impl Strategy<Value = (usize, usize, u64, u64, usize, Option<(usize, usize)>)> {
    (
        0..BUILTIN_SCRIPTS.len(),
        0..BUILTIN_POLICIES.len(),
        1u64..=40,
        any::<u64>(),
        prop::sample::select(vec![0usize, 0, 0, 0, 1, 1, 2]),
        prop::option::of((0usize..4, 0usize..3)),
    )
}

pub fn build_config(spec: &(usize, usize, u64, u64, usize, Option<(usize, usize)>)) -> RunConfig {
    let &(script, policy, runs, seed, mode, post) = spec;
    let name = BUILTIN_SCRIPTS[script];
    let exp = ExperimentScript::builtin(name).unwrap().compile().unwrap();
    let postselect = post.map(|(v, x)| {
        let vars = exp.variables();
        let var = &vars[v % vars.len()];
        format!("{}={}", var.name, var.values[x % var.values.len()])
    });
    RunConfig {
        policy: PolicyRef::Named(BUILTIN_POLICIES[policy].into()),
        runs,
        seed,
        postselect,
        mode: [Mode::Sample, Mode::Exact, Mode::Matrix][mode],
        ..RunConfig::new(name, "unitary")
    }
}

/// The same config yields byte-identical reports, which survive a JSON
/// round trip and replay run by run.
pub fn report_determinism(cases: u32) -> Result<String, String> {
    let result = runner(cases).run(&config_strategy(), |spec| {
        let fail = |e: &dyn std::fmt::Display| TestCaseError::fail(e.to_string());
        let config = build_config(&spec);
        let first = harness::run(&config).map_err(|e| fail(&e))?.to_json();
        let second = harness::run(&config).map_err(|e| fail(&e))?.to_json();
        prop_assert_eq!(&first, &second);
        let parsed = Report::from_json(&first).map_err(|e| fail(&e))?;
        prop_assert_eq!(&parsed.to_json(), &first);
        if config.mode == Mode::Sample {
            let index = spec.3 % config.runs;
            harness::replay(&parsed, index, Some(config.seed)).map_err(|e| fail(&e))?;
        }
        Ok(())
    });
    report(result, format!("{cases} cases"))
}
