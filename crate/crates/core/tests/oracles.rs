//! Frozen reference values computed independently (dense numpy linear
//! algebra) for a two-state, two-action MDP with two reward atoms.

use gio_core::future::{FutureKind, FutureOutcome, FutureSpace};
use gio_core::inference::{exact_posterior, mutual_information};
use gio_core::mdp::TabularMdp;
use gio_core::solver::{evaluate_policy, objective_value, softmax_improve, SolverConfig};
use gio_core::tables::PolicyTable;

fn tiny() -> TabularMdp {
    TabularMdp::new(
        2,
        2,
        0.9,
        vec![0.0, 1.0],
        vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0, 0.25, 0.75],
        vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.2, 0.8],
        vec![1.0, 0.0],
    )
    .unwrap()
}

fn pi() -> PolicyTable {
    PolicyTable::from_rows(vec![vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap()
}

fn close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b}");
}

#[test]
fn one_step_mutual_information() {
    let m = tiny();
    let space = FutureSpace::new(&m, FutureKind::OneStep).unwrap();
    let mi = mutual_information(&m, &pi(), &space).unwrap();
    close(mi[0], 0.6108643020548935, 1e-13);
    close(mi[1], 0.1398503804548321, 1e-13);
}

#[test]
fn next_state_mutual_information() {
    let m = tiny();
    let space = FutureSpace::new(&m, FutureKind::NextStateOnly).unwrap();
    let mi = mutual_information(&m, &pi(), &space).unwrap();
    close(mi[0], 0.16224361264267087, 1e-13);
    close(mi[1], 0.10014891554392491, 1e-13);
}

#[test]
fn posterior_rows() {
    let m = tiny();
    let space = FutureSpace::new(&m, FutureKind::OneStep).unwrap();
    let (post, _) = exact_posterior(&m, &pi(), &space).unwrap();
    let o = space
        .index_of(&FutureOutcome::Transition { next_state: 1, atom: 1 })
        .unwrap();
    assert_eq!(post.row(0, o).unwrap(), &[0.0, 1.0]);
    let r = post.row(1, o).unwrap();
    close(r[0], 5.0 / 9.0, 1e-15);
    close(r[1], 4.0 / 9.0, 1e-15);
}

#[test]
fn intrinsic_q_and_objective() {
    let m = tiny();
    let cfg = SolverConfig::with_eta(0.5);
    let ev = evaluate_policy(&m, &pi(), &cfg).unwrap();
    let want = [7.277677014953782, 7.996532198399299, 7.215387381844817, 7.655959790122058];
    for (got, want) in ev.q.as_slice().iter().zip(want) {
        close(*got, want, 1e-9);
    }
    close(objective_value(&m, &pi(), &cfg).unwrap(), 8.08630779439309, 1e-9);
}

#[test]
fn first_improvement_step() {
    let m = tiny();
    let cfg = SolverConfig::with_eta(0.5);
    let space = FutureSpace::new(&m, FutureKind::OneStep).unwrap();
    let ev = evaluate_policy(&m, &pi(), &cfg).unwrap();
    let (post, _) = exact_posterior(&m, &pi(), &space).unwrap();
    let imp = softmax_improve(&ev.q, &post, &pi(), &m, &space, &cfg).unwrap();
    let want = [0.19190016179454628, 0.8080998382054536, 0.37498798753262147, 0.6250120124673785];
    for (got, want) in imp.policy.as_slice().iter().zip(want) {
        close(*got, want, 1e-9);
    }
}
