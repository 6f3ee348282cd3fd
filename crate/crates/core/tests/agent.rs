use gio_core::agent::{
    delta_exact, delta_sampled, run, td_target, Agent, AgentParams, ReplayBuffer, TargetCritics,
};
use gio_core::baselines::standard_q;
use gio_core::envs;
use gio_core::future::{FutureKind, FutureSpace};
use gio_core::inference::mutual_information;
use gio_core::mdp::{rollout, Transition};
use gio_core::numeric::mean_std;
use gio_core::rng::SeededRng;
use gio_core::tables::{PolicyTable, QTable};
use gio_core::variational::{Optimizer, VariationalModel};

#[test]
fn replay_sampling_is_uniform() {
    let cap = 20;
    let mut b = ReplayBuffer::new(cap).unwrap();
    for i in 0..35 {
        b.push(Transition { s: i, a: 0, atom: 0, s_next: 0 });
    }
    let mut counts = vec![0usize; cap];
    let mut rng = SeededRng::new(17);
    let n = 100_000;
    for _ in 0..n {
        counts[b.sample_index(&mut rng)] += 1;
    }
    let e = n as f64 / cap as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    // 19 degrees of freedom, 0.999 quantile
    assert!(chi2 < 43.82, "{chi2}");
}

#[test]
fn sampled_delta_is_unbiased() {
    let env = envs::random(4, 3, 2, 3).unwrap();
    let pi = PolicyTable::random_positive(4, 3, 0.2, &mut SeededRng::new(1));
    let mut model = VariationalModel::for_mdp(&env);
    let mut rng = SeededRng::new(2);
    for i in 0..model.param_count() {
        model.set_param(i, 2.0 * rng.uniform() - 1.0);
    }
    for s in 0..4 {
        let draws: Vec<f64> = (0..20_000).map(|_| delta_sampled(&model, &pi, s, 1, &mut rng)).collect();
        let (m, sd) = mean_std(&draws);
        let exact = delta_exact(&model, &pi, s);
        assert!((m - exact).abs() < 3.0 * sd / (draws.len() as f64).sqrt(), "s {s}: {m} vs {exact}");
    }
}

#[test]
fn exact_delta_with_true_model_is_information() {
    let env = envs::random(5, 3, 2, 7).unwrap();
    let pi = PolicyTable::random_positive(5, 3, 0.2, &mut SeededRng::new(4));
    let model = VariationalModel::from_exact(&env, &pi).unwrap();
    let mi = mutual_information(&env, &pi, &FutureSpace::new(&env, FutureKind::OneStep).unwrap()).unwrap();
    for s in 0..5 {
        assert!((delta_exact(&model, &pi, s) - mi[s]).abs() < 1e-12);
    }
}

#[test]
fn target_uses_the_smaller_critic() {
    let q1 = QTable::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let q2 = QTable::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
    let targets = TargetCritics { q1: q1.clone(), q2: q2.clone() };
    let y = td_target(&targets, &[0.25, 0.75], 0.5, 1, 0.2, 0.9, 0.1);
    let want = 0.5 + 0.9 * (0.25 * 3.0 + 0.75 * 4.0 + 0.1 * 0.2);
    assert!((y - want).abs() < 1e-15);
    let swapped = TargetCritics { q1: q2, q2: q1 };
    assert_eq!(td_target(&swapped, &[0.25, 0.75], 0.5, 1, 0.2, 0.9, 0.1), y);
}

#[test]
fn critics_learn_standard_values_under_a_frozen_policy() {
    let env = envs::random(3, 2, 2, 5).unwrap();
    let pi = PolicyTable::uniform(3, 2);
    let params = AgentParams {
        eta: 0.0,
        tau: 0.05,
        lr_critic: 0.5,
        batch_size: 256,
        ..AgentParams::default()
    };
    let mut agent = Agent::new(&env, params).unwrap();
    let model = VariationalModel::for_mdp(&env);
    let mut rng = SeededRng::new(9);
    for t in rollout(&env, &pi, 200_000, &mut rng).unwrap() {
        agent.buffer_mut().push(t);
    }
    let want = standard_q(&env, &pi).unwrap();
    for i in 0..10_000 {
        // decaying step so sampling noise averages out
        agent.params_mut().lr_critic = 0.5 / (1.0 + i as f64 / 200.0);
        let batch = agent.buffer().sample(256, &mut rng).unwrap();
        agent.critic_update(&model, &batch, &mut rng).unwrap();
        agent.polyak();
    }
    let err = agent.min_q().sup_dist(&want);
    assert!(err < 1e-2, "{err}");
}

#[test]
fn actor_reaches_its_target() {
    let env = envs::random(4, 3, 2, 2).unwrap();
    let model = VariationalModel::from_exact(&env, &PolicyTable::uniform(4, 3)).unwrap();
    let mut agent = Agent::new(&env, AgentParams { eta: 0.4, lr_actor: 4.0, ..AgentParams::default() }).unwrap();
    let mut rng = SeededRng::new(3);
    for c in agent.critics_mut() {
        for x in c.as_mut_slice() {
            *x = 2.0 * rng.uniform();
        }
    }
    let states = [0, 1, 2, 3];
    let target: Vec<Vec<f64>> = states.iter().map(|&s| agent.actor_target(&model, s)).collect();
    for _ in 0..5000 {
        agent.actor_update(&model, &states).unwrap();
    }
    let tv = states
        .iter()
        .map(|&s| 0.5 * agent.policy().row(s).iter().zip(&target[s]).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .fold(0.0, f64::max);
    assert!(tv < 1e-6, "{tv}");
}

#[test]
fn actor_gradient_matches_finite_differences() {
    let env = envs::random(3, 3, 2, 6).unwrap();
    let model = VariationalModel::from_exact(&env, &PolicyTable::uniform(3, 3)).unwrap();
    for eta in [0.0, 0.3] {
        let mut agent = Agent::new(&env, AgentParams { eta, ..AgentParams::default() }).unwrap();
        let mut rng = SeededRng::new(1);
        for c in agent.critics_mut() {
            for x in c.as_mut_slice() {
                *x = rng.uniform();
            }
        }
        let theta: Vec<f64> = (0..9).map(|_| rng.uniform() - 0.5).collect();
        agent.set_theta(theta.clone()).unwrap();
        let states = [0, 2, 2, 1];
        let (_, g) = agent.actor_gradient(&model, &states).unwrap();
        let eps = 1e-6;
        for i in 0..9 {
            let mut th = theta.clone();
            th[i] += eps;
            agent.set_theta(th.clone()).unwrap();
            let up = agent.actor_gradient(&model, &states).unwrap().0;
            th[i] -= 2.0 * eps;
            agent.set_theta(th).unwrap();
            let down = agent.actor_gradient(&model, &states).unwrap().0;
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-7, "eta {eta} theta[{i}]: {fd} vs {}", g[i]);
        }
        agent.set_theta(theta).unwrap();
    }
}

#[test]
fn planning_gradient_is_the_model_expectation() {
    let env = envs::random(4, 2, 2, 8).unwrap();
    let pi = PolicyTable::uniform(4, 2);
    let mut model = VariationalModel::from_exact(&env, &pi).unwrap();
    // mark the model as trained without moving it
    Optimizer::new(0.0, 0.0).step(&mut model, &[]);
    let mut agent = Agent::new(&env, AgentParams { eta: 0.2, plan_batch: 64, ..AgentParams::default() }).unwrap();
    let mut rng = SeededRng::new(5);
    for c in agent.critics_mut() {
        for x in c.as_mut_slice() {
            *x = rng.uniform();
        }
    }
    for t in [Transition { s: 0, a: 0, atom: 0, s_next: 1 }, Transition { s: 3, a: 1, atom: 1, s_next: 2 }] {
        agent.buffer_mut().push(t);
    }
    let mut d = [0.0; 4];
    for t in agent.buffer().as_slice() {
        for a in 0..2 {
            for (sn, p) in model.p_next_row(t.s, a).iter().enumerate() {
                d[sn] += 0.5 * agent.policy().prob(t.s, a) * p;
            }
        }
    }
    let mut want = vec![0.0; 8];
    for (s, w) in d.iter().enumerate() {
        let g = agent.actor_gradient(&model, &[s]).unwrap().1;
        for (x, gi) in want.iter_mut().zip(&g) {
            *x += w * gi;
        }
    }
    let reps = 4000;
    let mut got = [0.0; 8];
    for _ in 0..reps {
        let states = agent.plan_states(&model, &mut rng).unwrap();
        let g = agent.actor_gradient(&model, &states).unwrap().1;
        for (x, gi) in got.iter_mut().zip(&g) {
            *x += gi / reps as f64;
        }
    }
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 2e-3, "{a} vs {b}");
    }
}

#[test]
fn untrained_model_skips_planning() {
    let env = envs::chain(3).unwrap();
    let model = VariationalModel::for_mdp(&env);
    let mut agent = Agent::new(&env, AgentParams::default()).unwrap();
    agent.buffer_mut().push(Transition { s: 0, a: 0, atom: 0, s_next: 1 });
    assert!(agent.plan_update(&model, &mut SeededRng::new(0)).unwrap().is_none());
}

fn short_params() -> AgentParams {
    AgentParams {
        eta: 0.05,
        warmup: 100,
        eval_every: 1000,
        eval_episodes: 5,
        eval_horizon: 50,
        ..AgentParams::default()
    }
}

#[test]
fn runs_are_reproducible() {
    let env = envs::gridworld(3, 0.1).unwrap();
    let go = || {
        let mut agent = Agent::new(&env, short_params()).unwrap();
        let mut model = VariationalModel::for_mdp(&env);
        run(&mut agent, &env, &mut model, 3000, 42).unwrap()
    };
    let (a, b) = (go(), go());
    assert_eq!(a.rows.len(), 3);
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(format!("{x:?}"), format!("{y:?}"));
    }
    assert_eq!(a.final_policy, b.final_policy);
    assert!(a.plan_updates > 0);
}

#[test]
fn disabling_planning_skips_it() {
    let env = envs::gridworld(3, 0.1).unwrap();
    let mut agent = Agent::new(&env, AgentParams { plan_every: None, ..short_params() }).unwrap();
    let mut model = VariationalModel::for_mdp(&env);
    let out = run(&mut agent, &env, &mut model, 2000, 1).unwrap();
    assert_eq!(out.plan_updates, 0);
}
