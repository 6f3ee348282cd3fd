use gio_core::baselines::{soft_policy_iteration, standard_q};
use gio_core::envs;
use gio_core::future::{FutureKind, FutureSpace};
use gio_core::inference::mutual_information;
use gio_core::rng::SeededRng;
use gio_core::solver::{evaluate_policy, policy_iteration, verify_monotonicity, Mutation, SolverConfig};
use gio_core::tables::PolicyTable;

#[test]
fn sweeps_never_lower_q_for_any_future_kind() {
    for kind in [FutureKind::OneStep, FutureKind::NextStateOnly, FutureKind::KStep(2)] {
        for seed in 0..8 {
            let mdp = envs::random(5, 3, 2, seed).unwrap();
            let pi0 = PolicyTable::random_positive(5, 3, 0.2, &mut SeededRng::new(seed));
            let cfg = SolverConfig {
                future: kind,
                ..SolverConfig::with_eta(0.5)
            };
            let res = policy_iteration(&mdp, &pi0, &cfg).unwrap();
            assert!(res.converged, "{kind:?} seed {seed}");
            assert!(res.trace.worst_q_delta() >= -1e-8, "{kind:?} seed {seed}: {}", res.trace.worst_q_delta());
        }
    }
}

#[test]
fn point_mass_posterior_reduces_to_soft_iteration() {
    let mdp = envs::invertible(4, 3).unwrap();
    let pi0 = PolicyTable::random_positive(4, 3, 0.3, &mut SeededRng::new(2));
    let eta = 0.7;
    let cfg = SolverConfig {
        outer_max_sweeps: 12,
        ..SolverConfig::with_eta(eta)
    };
    let ours = policy_iteration(&mdp, &pi0, &cfg).unwrap();
    let soft = soft_policy_iteration(&mdp, &pi0, eta, ours.q_history.len() - 1, 0.0).unwrap();
    for (k, (a, b)) in ours.q_history.iter().zip(&soft.q_history).enumerate() {
        assert!(a.sup_dist(b) < 1e-8, "sweep {k}: {}", a.sup_dist(b));
    }
}

#[test]
fn uninformative_env_has_no_bonus_and_a_fixed_policy() {
    let mdp = envs::uninformative(4, 3).unwrap();
    let pi0 = PolicyTable::random_positive(4, 3, 0.3, &mut SeededRng::new(9));
    let space = FutureSpace::new(&mdp, FutureKind::OneStep).unwrap();
    assert!(mutual_information(&mdp, &pi0, &space).unwrap().iter().all(|m| m.abs() < 1e-12));
    // every action has the same Q, so the softmax image of pi0 is pi0 itself
    let res = policy_iteration(&mdp, &pi0, &SolverConfig::with_eta(0.4)).unwrap();
    assert!(res.converged);
    let diff = res.policy.as_slice().iter().zip(pi0.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-10, "{diff}");
}

#[test]
fn zero_temperature_evaluation_is_standard() {
    let mdp = envs::random(5, 3, 3, 21).unwrap();
    let pi = PolicyTable::random_positive(5, 3, 0.2, &mut SeededRng::new(1));
    let ours = evaluate_policy(&mdp, &pi, &SolverConfig::with_eta(0.0)).unwrap().q;
    assert!(ours.sup_dist(&standard_q(&mdp, &pi).unwrap()) < 1e-9);
}

#[test]
fn negated_temperature_is_caught() {
    // The mutation breaks the softmax fixed point, so at least one of the
    // monotonicity gaps or the certificate must flag it somewhere.
    let mut flagged = 0;
    for seed in 0..10 {
        let mdp = envs::random(5, 3, 2, seed).unwrap();
        let pi0 = PolicyTable::random_positive(5, 3, 0.2, &mut SeededRng::new(seed));
        let cfg = SolverConfig {
            mutation: Some(Mutation::NegateEta),
            outer_max_sweeps: 50,
            ..SolverConfig::with_eta(1.0)
        };
        let mono = verify_monotonicity(&mdp, &pi0, &cfg).unwrap();
        let res = policy_iteration(&mdp, &pi0, &cfg).unwrap();
        if !mono.holds(1e-8) || res.trace.worst_q_delta() < -1e-8 || res.trace.last().unwrap().fixed_point_kl > 1e-8 {
            flagged += 1;
        }
    }
    assert_eq!(flagged, 10);
}

#[test]
fn benchmark_envs_converge_with_certificates() {
    for spec in ["gridworld(4,0.1)", "chain(5)", "random(6,3,2,3)", "invertible(4,2)", "noisy_tv(6,3)"] {
        let mdp = envs::make(spec).unwrap();
        let pi0 = PolicyTable::uniform(mdp.n_states(), mdp.n_actions());
        let res = policy_iteration(&mdp, &pi0, &SolverConfig::with_eta(0.5)).unwrap();
        assert!(res.converged, "{spec}");
        let last = res.trace.last().unwrap();
        assert!(last.fixed_point_kl < 1e-8, "{spec}: {}", last.fixed_point_kl);
        assert!(res.trace.worst_normalizer_residual() < 1e-9, "{spec}");
    }
}
