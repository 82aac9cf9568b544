mod common;

use common::oracle::{self, Lab, Proj, A, B};
use friendsim::agents::Atom;
use friendsim::circuit::OTHER;
use friendsim::hilbert::Distribution;
use friendsim::policies::{prediction_matrix, Policy, Prediction};
use friendsim::protocols::{exact_analysis, Engine, ExperimentScript, Verdict, BUILTIN_SCRIPTS};
use friendsim::reasoning::RuleQQuery;

fn script(name: &str) -> ExperimentScript {
    ExperimentScript::builtin(name).unwrap()
}

fn policy(name: &str) -> Policy {
    Policy::builtin(name).unwrap()
}

fn assert_close(got: f64, want: f64, tol: f64, what: &str) {
    assert!((got - want).abs() <= tol, "{what}: got {got}, want {want}");
}

#[test]
fn joint_ok_fail_table_matches_oracle() {
    let exact = exact_analysis(&script("fr"), &policy("unitary")).unwrap();
    let mut total = 0.0;
    for uo in Lab::ALL {
        for wo in Lab::ALL {
            let want = oracle::fr_joint(uo, wo);
            total += want;
            let got = exact.probability(&[("u", uo.label()), ("w", wo.label())]);
            assert_close(got, want, 1e-10, &format!("P(u={}, w={})", uo.label(), wo.label()));
        }
    }
    assert_close(total, 1.0, 1e-9, "oracle total");
    assert_close(oracle::fr_joint(Lab::Fail, Lab::Fail), 0.75, 1e-12, "oracle fail/fail");
}

#[test]
fn collapse_joint_table_matches_oracle() {
    let exact = exact_analysis(&script("fr"), &policy("collapse")).unwrap();
    for uo in [Lab::Ok, Lab::Fail] {
        for wo in [Lab::Ok, Lab::Fail] {
            let want = oracle::fr_joint_collapse(uo, wo);
            assert_close(want, 0.25, 1e-12, "collapse oracle");
            assert_close(exact.probability(&[("u", uo.label()), ("w", wo.label())]), want, 1e-10, "collapse engine");
        }
    }
    assert_eq!(exact.verdict_probability(Verdict::Contradiction), 0.0);
}

#[test]
fn subjective_cut_predicts_like_unitary() {
    let u = exact_analysis(&script("fr"), &policy("unitary")).unwrap();
    let s = exact_analysis(&script("fr"), &policy("subjective")).unwrap();
    for (vu, vs) in u.joint(&["a", "b", "u", "w"]).iter().zip(s.joint(&["a", "b", "u", "w"])) {
        assert_eq!(vu.0, vs.0);
        assert_close(vs.1, vu.1, 1e-12, "subjective branch");
    }
    assert_close(s.verdict_probability(Verdict::Contradiction), 1.0 / 12.0, 1e-10, "subjective contradictions");
}

fn query(engine: &Engine, agent: &str, time: u32, given: Atom, target: &str) -> Distribution {
    let q = RuleQQuery {
        agent: agent.into(),
        time,
        conditioning: vec![given],
        target: target.into(),
        view: engine.experiment().view(agent).unwrap().clone(),
    };
    engine.reasoner().conditional_distribution(&q).unwrap()
}

/// Every conditional each agent can form in their own view, against the
/// oracle, including the uncertain ones that must not become statements.
#[test]
fn view_conditionals_match_oracle() {
    let engine = Engine::new(&script("fr"), &policy("unitary")).unwrap();
    let s = oracle::fr_after_bob();
    for a in 0..2 {
        let d = query(&engine, "Alice", 1, Atom::new("a", a.to_string(), 1), "w");
        for wo in Lab::ALL {
            let want = oracle::conditional(&s, oracle::w(wo), &[Proj::Bit(A, a)]);
            assert_close(d.get(wo.label()), want, 1e-9, &format!("Alice P(w={}|a={a})", wo.label()));
        }
    }
    for b in 0..2 {
        let d = query(&engine, "Bob", 2, Atom::new("b", b.to_string(), 2), "a");
        for a in 0..2 {
            let want = oracle::conditional(&s, Proj::Bit(A, a), &[Proj::Bit(B, b)]);
            assert_close(d.get(&a.to_string()), want, 1e-9, &format!("Bob P(a={a}|b={b})"));
        }
    }
    for uo in [Lab::Ok, Lab::Fail] {
        let d = query(&engine, "Ursula", 3, Atom::new("u", uo.label(), 3), "b");
        for b in 0..2 {
            let want = oracle::conditional(&s, Proj::Bit(B, b), &[oracle::u(uo)]);
            assert_close(d.get(&b.to_string()), want, 1e-9, &format!("Ursula P(b={b}|u={})", uo.label()));
        }
    }
}

#[test]
fn bob_seeing_b0_learns_nothing_about_a() {
    let engine = Engine::new(&script("fr"), &policy("unitary")).unwrap();
    let d = query(&engine, "Bob", 2, Atom::new("b", "0", 2), "a");
    assert_close(d.get("0"), 0.5, 1e-12, "P(a=0|b=0)");
    let q = RuleQQuery {
        agent: "Bob".into(),
        time: 2,
        conditioning: vec![Atom::new("b", "0", 2)],
        target: "a".into(),
        view: engine.experiment().view("Bob").unwrap().clone(),
    };
    assert_eq!(engine.reasoner().rule_q(&q).unwrap(), None);
}

#[test]
fn impossible_conditioning_is_rejected() {
    let engine = Engine::new(&script("fr"), &policy("unitary")).unwrap();
    let exp = engine.experiment();
    let q = RuleQQuery {
        agent: "Wigner".into(),
        time: 4,
        conditioning: vec![Atom::new("u", "other", 3)],
        target: "w".into(),
        view: exp.view("Wigner").unwrap().clone(),
    };
    assert!(engine.reasoner().conditional_distribution(&q).is_err());
}

/// The global state after Bob's measurement, written out by hand:
/// √⅓ |0,a=0,e0⟩|0,b=0,e0⟩ + √⅓ |1,a=1,e1⟩|0,b=0,e0⟩ + √⅓ |1,a=1,e1⟩|1,b=1,e1⟩.
#[test]
fn state_after_bob_matches_hand_written_amplitudes() {
    let exp = script("fr").compile().unwrap();
    let state = exp.unitary_state_at(2).unwrap();
    let mem = |v: &str, x: &str| format!("I am certain that {v}={x}.");
    let third = (1.0f64 / 3.0).sqrt();
    let terms = [
        ("0", mem("a", "0"), "0", "0", mem("b", "0"), "0"),
        ("1", mem("a", "1"), "1", "0", mem("b", "0"), "0"),
        ("1", mem("a", "1"), "1", "1", mem("b", "1"), "1"),
    ];
    let mut weight = 0.0;
    for (r, a, ea, s, b, eb) in &terms {
        let amp = state
            .amplitude(&[("R", r), ("A", a), ("Ā", ea), ("S", s), ("B", b), ("B̄", eb)])
            .unwrap();
        assert!((amp.re - third).abs() <= 1e-10 && amp.im.abs() <= 1e-10, "{terms:?}: {amp}");
        weight += amp.norm_sqr();
    }
    assert_close(weight, 1.0, 1e-10, "listed terms carry all the weight");
}

#[test]
fn other_outcomes_never_occur() {
    for name in BUILTIN_SCRIPTS {
        for p in ["unitary", "collapse", "subjective", "hadamard"] {
            let exact = exact_analysis(&script(name), &policy(p)).unwrap();
            for v in &exact.variables {
                let d = exact.marginal(v);
                assert!(d.get(OTHER).abs() <= 1e-12, "{name}/{p}: P({v}=other) = {}", d.get(OTHER));
            }
        }
    }
}

/// Over all eight live outcome combinations a contradiction appears iff
/// u = w = ok, and the branch weights are the oracle's.
#[test]
fn contradiction_is_exclusive_to_ok_ok() {
    let engine = Engine::new(&script("fr"), &policy("unitary")).unwrap();
    let live: Vec<_> = engine.branches().iter().filter(|b| b.probability > 1e-12).collect();
    assert_eq!(live.len(), 8);
    for b in live {
        let t = &b.trace;
        let ok_ok = t.outcome("u") == Some("ok") && t.outcome("w") == Some("ok");
        assert_eq!(t.contradiction.is_some(), ok_ok, "{:?}", t.outcomes);
        assert_eq!(t.verdict == Verdict::Contradiction, ok_ok);
    }
    let s = oracle::fr_after_bob();
    let exact = engine.analysis();
    // b and u act on different labs, so their joint is well defined; b and w
    // are incompatible measurements of Bob's lab and have no joint.
    for u in [Lab::Ok, Lab::Fail] {
        for bit in 0..2 {
            let want = oracle::joint(&s, &[Proj::Bit(B, bit), oracle::u(u)]);
            let b = bit.to_string();
            let got = exact.probability(&[("b", b.as_str()), ("u", u.label())]);
            assert_close(got, want, 1e-10, &format!("P(b={bit}, u={})", u.label()));
        }
    }
}

const GOLDEN: &[&str] = &[
    "[t=1] Alice: \"I am certain that a=1 at t=1.\"",
    "[t=1] Alice: \"I am certain that w=fail at t=4.\"",
    "[t=2] Bob: \"I am certain that b=1 at t=2.\"",
    "[t=2] Bob: \"I am certain that a=1 at t=1.\"",
    "[t=2] Bob: \"I am certain that Alice is certain that w=fail at t=4.\"",
    "[t=2] Bob: \"I am certain that w=fail at t=4.\"",
    "[t=3] Ursula: \"I am certain that u=ok at t=3.\"",
    "[t=3] Ursula: \"I am certain that b=1 at t=2.\"",
    "[t=3] Ursula: \"I am certain that Bob is certain that a=1 at t=1.\"",
    "[t=3] Ursula: \"I am certain that Bob is certain that Alice is certain that w=fail at t=4.\"",
    "[t=3] Ursula: \"I am certain that Bob is certain that w=fail at t=4.\"",
    "[t=3] Ursula: \"I am certain that a=1 at t=1.\"",
    "[t=3] Ursula: \"I am certain that Alice is certain that w=fail at t=4.\"",
    "[t=3] Ursula: \"I am certain that w=fail at t=4.\"",
    "[t=3] Wigner: \"I am certain that Ursula is certain that w=fail at t=4.\"",
    "[t=4] Wigner: \"I am certain that w=fail at t=4.\"",
    "[t=4] Wigner: \"I am certain that w=ok at t=4.\"",
    "[t=5] Wigner: \"I am certain that w=fail and I am certain that w=ok.\"",
];

#[test]
fn golden_transcript_of_the_ok_ok_run() {
    let engine = Engine::new(&script("fr"), &policy("unitary")).unwrap();
    let b = engine
        .branches()
        .iter()
        .find(|b| b.trace.outcome("u") == Some("ok") && b.trace.outcome("w") == Some("ok"))
        .unwrap();
    assert_eq!(b.trace.transcript, GOLDEN);
}

#[test]
fn notebook_separation_and_disallowed_cell() {
    let scripts = [script("deutsch")];
    let m = prediction_matrix(&scripts, &Policy::builtins()).unwrap();
    let w = |p: &str| m.cell(p, "deutsch:w").unwrap().clone();
    let plus = |p: &str| match w(p) {
        Prediction::Distribution { values } => values.get("+"),
        Prediction::Disallowed { reason } => panic!("{p}: {reason}"),
    };
    assert_close(plus("unitary"), oracle::deutsch_plus(false), 1e-10, "unitary");
    assert_close(plus("collapse"), oracle::deutsch_plus(true), 1e-10, "collapse");
    assert!(matches!(w("objective-cut"), Prediction::Disallowed { .. }));
}

#[test]
fn objective_cut_aborts_before_any_outside_measurement() {
    let fr = exact_analysis(&script("fr"), &policy("objective-cut")).unwrap();
    assert_close(fr.verdict_probability(Verdict::Aborted), 1.0, 1e-10, "fr aborted");
    assert!(fr.blocked("u").is_some() && fr.blocked("w").is_some());
    let engine = Engine::new(&script("deutsch"), &policy("objective-cut")).unwrap();
    for b in engine.branches() {
        let v = b.trace.violation.as_ref().unwrap();
        assert_eq!((v.time, v.operation.as_str(), v.register.as_str()), (3, "UNDO", "A"));
    }
}
