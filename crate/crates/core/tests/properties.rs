use gio_core::agent::ReplayBuffer;
use gio_core::envs;
use gio_core::future::{FutureKernel, FutureKind, FutureSpace};
use gio_core::inference::{corollary1_gap, exact_posterior, kl, lemma1_gap, mutual_information, mutual_information_entropy_form};
use gio_core::mdp::{validate, TabularMdp, Transition};
use gio_core::rng::SeededRng;
use gio_core::solver::{expected_log_posterior, one_step_objective, softmax_from_parts, IntrinsicBellman};
use gio_core::tables::{PolicyTable, QTable};
use gio_core::variational::{one_step_elbo, VariationalModel};
use proptest::prelude::*;

fn instance(states: usize, actions: usize, atoms: usize, seed: u64) -> (TabularMdp, PolicyTable, SeededRng) {
    let mdp = envs::random(states, actions, atoms, seed).unwrap();
    let mut rng = SeededRng::new(seed ^ 0xABCD);
    let pi = PolicyTable::random_positive(states, actions, 0.1, &mut rng);
    (mdp, pi, rng)
}

fn random_q(ns: usize, na: usize, scale: f64, rng: &mut SeededRng) -> QTable {
    QTable::from_vec(ns, na, (0..ns * na).map(|_| scale * (2.0 * rng.uniform() - 1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_mdps_validate(s in 1usize..8, a in 1usize..5, k in 1usize..4, seed in any::<u64>()) {
        prop_assert!(validate(&envs::random(s, a, k, seed).unwrap()).is_empty());
    }

    #[test]
    fn operator_contracts(s in 1usize..8, a in 1usize..5, k in 1usize..4, seed in any::<u64>(), eta in 0.0f64..2.0) {
        let (mdp, pi, mut rng) = instance(s, a, k, seed);
        let space = FutureSpace::new(&mdp, FutureKind::OneStep).unwrap();
        let op = IntrinsicBellman::exact(&mdp, &pi, &space, eta).unwrap();
        let q1 = random_q(s, a, 10.0, &mut rng);
        let q2 = random_q(s, a, 10.0, &mut rng);
        let lhs = op.apply(&q1).sup_dist(&op.apply(&q2));
        prop_assert!(lhs <= mdp.gamma() * q1.sup_dist(&q2) + 1e-12, "{lhs}");
    }

    #[test]
    fn information_is_nonnegative_and_forms_agree(s in 1usize..7, a in 1usize..5, k in 1usize..4, seed in any::<u64>()) {
        let (mdp, pi, _) = instance(s, a, k, seed);
        let space = FutureSpace::new(&mdp, FutureKind::OneStep).unwrap();
        let ratio = mutual_information(&mdp, &pi, &space).unwrap();
        let ent = mutual_information_entropy_form(&mdp, &pi, &space).unwrap();
        for (x, y) in ratio.iter().zip(&ent) {
            prop_assert!(*x >= -1e-12);
            prop_assert!((x - y).abs() < 1e-10);
            prop_assert!(*x <= (a as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn coarser_futures_carry_less_information(s in 1usize..6, a in 1usize..4, k in 1usize..3, seed in any::<u64>()) {
        let (mdp, pi, _) = instance(s, a, k, seed);
        let one = mutual_information(&mdp, &pi, &FutureSpace::new(&mdp, FutureKind::OneStep).unwrap()).unwrap();
        let next = mutual_information(&mdp, &pi, &FutureSpace::new(&mdp, FutureKind::NextStateOnly).unwrap()).unwrap();
        let two = mutual_information(&mdp, &pi, &FutureSpace::new(&mdp, FutureKind::KStep(2)).unwrap()).unwrap();
        for i in 0..s {
            prop_assert!(next[i] <= one[i] + 1e-12);
            // the tail of a k-step future adds nothing once the first transition is known
            prop_assert!((two[i] - one[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn posterior_rows_normalize(s in 1usize..7, a in 1usize..5, k in 1usize..4, seed in any::<u64>()) {
        let (mdp, pi, _) = instance(s, a, k, seed);
        let space = FutureSpace::new(&mdp, FutureKind::OneStep).unwrap();
        let (post, _) = exact_posterior(&mdp, &pi, &space).unwrap();
        for st in 0..s {
            for o in 0..space.len() {
                if let Some(r) = post.row(st, o) {
                    prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_target_beats_any_policy(s in 1usize..6, a in 2usize..5, seed in any::<u64>(), eta in 0.05f64..3.0) {
        let (mdp, pi, mut rng) = instance(s, a, 2, seed);
        let space = FutureSpace::new(&mdp, FutureKind::OneStep).unwrap();
        let kernel = FutureKernel::build(&mdp, &space, &pi).unwrap();
        let (post, _) = exact_posterior(&mdp, &pi, &space).unwrap();
        let elp = expected_log_posterior(&kernel, &post);
        let q = random_q(s, a, 5.0, &mut rng);
        let g = softmax_from_parts(&q, &elp, eta).unwrap().policy;
        for st in 0..s {
            let best = one_step_objective(q.row(st), &elp[st * a..(st + 1) * a], eta, g.row(st));
            for _ in 0..20 {
                let rho = rng.dirichlet1(a);
                prop_assert!(one_step_objective(q.row(st), &elp[st * a..(st + 1) * a], eta, &rho) <= best + 1e-9);
            }
        }
    }

    #[test]
    fn elbo_bounds_log_marginal(s in 1usize..5, a in 1usize..4, k in 1usize..3, seed in any::<u64>()) {
        let (mdp, pi, mut rng) = instance(s, a, k, seed);
        let mut model = VariationalModel::for_mdp(&mdp);
        for i in 0..model.param_count() {
            model.set_param(i, 6.0 * rng.uniform() - 3.0);
        }
        for _ in 0..10 {
            let t = Transition { s: rng.below(s), a: 0, atom: rng.below(k), s_next: rng.below(s) };
            let e = one_step_elbo(&model, &pi, &t).unwrap();
            let lm = model.log_marginal(&pi, t.s, t.s_next, t.atom);
            prop_assert!(e.value <= lm + 1e-10);
            // factorization holds by construction
            let lp = model.log_p(t.s, 0, t.s_next, t.atom);
            prop_assert_eq!(lp, model.log_p_next(t.s, 0, t.s_next) + model.log_p_reward(t.s, 0, t.atom));
        }
    }

    #[test]
    fn lemma_gaps_are_kl(nx in 1usize..6, ny in 1usize..6, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let flat = rng.dirichlet1(nx * ny);
        let joint: Vec<Vec<f64>> = flat.chunks(ny).map(<[f64]>::to_vec).collect();
        let q = rng.dirichlet1(ny);
        let py: Vec<f64> = (0..ny).map(|y| joint.iter().map(|r| r[y]).sum()).collect();
        let g1 = lemma1_gap(&joint, &q).unwrap();
        prop_assert!(g1 >= -1e-12);
        prop_assert!((g1 - kl(&py, &q).unwrap()).abs() < 1e-10);
        let cond: Vec<Vec<f64>> = (0..ny).map(|_| rng.dirichlet1(nx)).collect();
        let g2 = corollary1_gap(&joint, &cond).unwrap();
        let want: f64 = (0..ny)
            .map(|y| {
                let p: Vec<f64> = joint.iter().map(|r| r[y] / py[y]).collect();
                py[y] * kl(&p, &cond[y]).unwrap()
            })
            .sum();
        prop_assert!(g2 >= -1e-12);
        prop_assert!((g2 - want).abs() < 1e-10);
    }

    #[test]
    fn buffer_never_exceeds_capacity(cap in 1usize..50, pushes in 0usize..200) {
        let mut b = ReplayBuffer::new(cap).unwrap();
        for i in 0..pushes {
            b.push(Transition { s: i, a: 0, atom: 0, s_next: 0 });
            prop_assert!(b.len() <= cap);
        }
        prop_assert_eq!(b.len(), pushes.min(cap));
    }

    #[test]
    fn future_indices_round_trip(s in 1usize..5, a in 1usize..3, k in 1usize..3, seed in any::<u64>()) {
        let mdp = envs::random(s, a, k, seed).unwrap();
        for kind in [FutureKind::OneStep, FutureKind::NextStateOnly, FutureKind::KStep(2)] {
            let space = FutureSpace::new(&mdp, kind).unwrap();
            for o in 0..space.len() {
                prop_assert_eq!(space.index_of(&space.outcome(o)), Some(o));
            }
        }
    }
}
