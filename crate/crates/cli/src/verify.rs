//! The `verify` suite: each check reports its worst case against a
//! tolerance, so a run doubles as a margin report.

use anyhow::Result;
use gio_core::envs;
use gio_core::future::{FutureKind, FutureSpace};
use gio_core::inference::{corollary1_gap, kl, lemma1_gap};
use gio_core::mdp::{rollout, Transition};
use gio_core::rng::SeededRng;
use gio_core::solver::{
    evaluate_operator, evaluate_policy, policy_iteration, verify_monotonicity, IntrinsicBellman, Mutation,
    SolverConfig,
};
use gio_core::tables::{PolicyTable, QTable};
use gio_core::variational::{gradient_check, one_step_elbo, VariationalModel};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    Contraction,
    FixedPoint,
    Normalizer,
    KlIdentities,
    Monotonicity,
    Certificate,
    ElboBound,
    Gradients,
}

impl Check {
    pub const ALL: [Check; 8] = [
        Check::Contraction,
        Check::FixedPoint,
        Check::Normalizer,
        Check::KlIdentities,
        Check::Monotonicity,
        Check::Certificate,
        Check::ElboBound,
        Check::Gradients,
    ];
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub check: Check,
    pub pass: bool,
    pub cases: usize,
    /// The worst observed value of the checked quantity.
    pub worst: f64,
    pub tolerance: f64,
    /// Distance from failing; negative means the check failed by this much.
    pub margin: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub pass: bool,
    pub mutation: Option<Mutation>,
    pub checks: Vec<CheckResult>,
}

/// Environments the suite runs on, with the temperature used for each.
pub const SHIPPED: [(&str, f64); 7] = [
    ("gridworld(4,0.1)", 0.1),
    ("chain(5)", 0.2),
    ("random(5,3,2,1)", 0.5),
    ("random(4,4,3,2)", 1.0),
    ("invertible(4,3)", 0.5),
    ("uninformative(3,2)", 0.5),
    ("noisy_tv(6,3)", 0.3),
];

/// `worst ≤ tol` passes.
fn at_most(check: Check, cases: usize, worst: f64, tol: f64, detail: String) -> CheckResult {
    CheckResult {
        check,
        pass: worst <= tol,
        cases,
        worst,
        tolerance: tol,
        margin: tol - worst,
        detail,
    }
}

/// `worst ≥ −tol` passes.
fn at_least(check: Check, cases: usize, worst: f64, tol: f64, detail: String) -> CheckResult {
    CheckResult {
        check,
        pass: worst >= -tol,
        cases,
        worst,
        tolerance: tol,
        margin: worst + tol,
        detail,
    }
}

fn random_q(ns: usize, na: usize, rng: &mut SeededRng) -> QTable {
    QTable::from_vec(ns, na, (0..ns * na).map(|_| 20.0 * rng.uniform() - 10.0).collect()).expect("finite")
}

/// A mutated solver may never settle, so its sweep budget is capped.
fn solver_cfg(eta: f64, mutation: Option<Mutation>) -> SolverConfig {
    let base = SolverConfig::with_eta(eta);
    SolverConfig {
        mutation,
        outer_max_sweeps: if mutation.is_some() { 500 } else { base.outer_max_sweeps },
        ..base
    }
}

fn contraction() -> Result<CheckResult> {
    let mut rng = SeededRng::new(16);
    let mut worst = f64::NEG_INFINITY;
    let mut cases = 0;
    for i in 0..50 {
        let (s, a, k) = (1 + rng.below(8), 1 + rng.below(4), 1 + rng.below(3));
        let mdp = envs::random(s, a, k, 160 + i)?;
        let pi = PolicyTable::random_positive(s, a, 0.1, &mut rng);
        let space = FutureSpace::new(&mdp, FutureKind::OneStep)?;
        let op = IntrinsicBellman::exact(&mdp, &pi, &space, 2.0 * rng.uniform())?;
        for _ in 0..10 {
            let (q1, q2) = (random_q(s, a, &mut rng), random_q(s, a, &mut rng));
            worst = worst.max(op.apply(&q1).sup_dist(&op.apply(&q2)) / q1.sup_dist(&q2) - mdp.gamma());
            cases += 1;
        }
    }
    Ok(at_most(Check::Contraction, cases, worst, 1e-12, "sup-norm ratio minus gamma".into()))
}

fn fixed_point() -> Result<CheckResult> {
    let mut rng = SeededRng::new(17);
    let mut worst = 0.0f64;
    for &(spec, eta) in &SHIPPED {
        let mdp = envs::make(spec)?;
        let pi = PolicyTable::random_positive(mdp.n_states(), mdp.n_actions(), 0.2, &mut rng);
        let cfg = SolverConfig::with_eta(eta);
        let a = evaluate_policy(&mdp, &pi, &cfg)?;
        let space = FutureSpace::new(&mdp, cfg.future)?;
        let op = IntrinsicBellman::exact(&mdp, &pi, &space, eta)?;
        let far = random_q(mdp.n_states(), mdp.n_actions(), &mut rng);
        let b = evaluate_operator(&op, Some(&far), cfg.eval_tol, cfg.eval_max_iters)?;
        worst = worst.max(a.q.sup_dist(&b.q));
    }
    Ok(at_most(Check::FixedPoint, SHIPPED.len(), worst, 1e-9, "spread between two initializations".into()))
}

fn normalizer(mutation: Option<Mutation>) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for &(spec, eta) in &SHIPPED {
        let mdp = envs::make(spec)?;
        let res = policy_iteration(&mdp, &PolicyTable::uniform(mdp.n_states(), mdp.n_actions()), &solver_cfg(eta, mutation))?;
        worst = worst.max(res.trace.worst_normalizer_residual());
        cases += res.sweeps();
    }
    Ok(at_most(
        Check::Normalizer,
        cases,
        worst,
        1e-9,
        "|Q + eta E[log p] - eta (log pi' + log Z)| after each improvement".into(),
    ))
}

fn kl_identities() -> Result<CheckResult> {
    let mut rng = SeededRng::new(18);
    let (mut err, mut neg) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (nx, ny) = (1 + rng.below(5), 1 + rng.below(5));
        let flat = rng.dirichlet1(nx * ny);
        let joint: Vec<Vec<f64>> = flat.chunks(ny).map(<[f64]>::to_vec).collect();
        let py: Vec<f64> = (0..ny).map(|y| joint.iter().map(|r| r[y]).sum()).collect();
        let q = rng.dirichlet1(ny);
        let g1 = lemma1_gap(&joint, &q)?;
        let cond: Vec<Vec<f64>> = (0..ny).map(|_| rng.dirichlet1(nx)).collect();
        let g2 = corollary1_gap(&joint, &cond)?;
        let mut want2 = 0.0;
        for y in 0..ny {
            let p: Vec<f64> = joint.iter().map(|r| r[y] / py[y]).collect();
            want2 += py[y] * kl(&p, &cond[y])?;
        }
        err = err.max((g1 - kl(&py, &q)?).abs()).max((g2 - want2).abs());
        neg = neg.min(g1).min(g2);
    }
    let mut r = at_most(Check::KlIdentities, 1000, err, 1e-10, format!("|gap - KL|; min gap {neg:.2e}"));
    r.pass &= neg >= -1e-12;
    Ok(r)
}

fn monotonicity(mutation: Option<Mutation>) -> Result<CheckResult> {
    let mut worst = f64::INFINITY;
    let mut cases = 0;
    for kind in [FutureKind::OneStep, FutureKind::NextStateOnly, FutureKind::KStep(2)] {
        for seed in 0..10 {
            let mdp = envs::random(5, 3, 2, 500 + seed)?;
            let pi0 = PolicyTable::random_positive(5, 3, 0.1, &mut SeededRng::new(seed));
            let cfg = SolverConfig {
                future: kind,
                ..solver_cfg(0.5, mutation)
            };
            let one = verify_monotonicity(&mdp, &pi0, &cfg)?;
            worst = worst.min(one.gap_frozen).min(one.gap_refresh).min(one.gap_total);
            let res = policy_iteration(&mdp, &pi0, &cfg)?;
            worst = worst.min(res.trace.worst_q_delta());
            cases += 1;
        }
    }
    Ok(at_least(
        Check::Monotonicity,
        cases,
        worst,
        1e-8,
        "min over sweeps and (s,a) of Q_{k+1} - Q_k".into(),
    ))
}

fn certificate(mutation: Option<Mutation>) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut unconverged = Vec::new();
    for &(spec, eta) in &SHIPPED {
        let mdp = envs::make(spec)?;
        let res = policy_iteration(&mdp, &PolicyTable::uniform(mdp.n_states(), mdp.n_actions()), &solver_cfg(eta, mutation))?;
        let kl = res.trace.last().map_or(f64::INFINITY, |r| r.fixed_point_kl);
        worst = worst.max(kl);
        if !res.converged {
            unconverged.push(spec);
        }
    }
    let mut r = at_most(
        Check::Certificate,
        SHIPPED.len(),
        worst,
        1e-8,
        format!("max_s KL(pi* || softmax image); unconverged: {unconverged:?}"),
    );
    r.pass &= unconverged.is_empty();
    Ok(r)
}

fn elbo_bound() -> Result<CheckResult> {
    let mut rng = SeededRng::new(19);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for &(spec, _) in &SHIPPED {
        let mdp = envs::make(spec)?;
        let pi = PolicyTable::random_positive(mdp.n_states(), mdp.n_actions(), 0.2, &mut rng);
        let mut m = VariationalModel::for_mdp(&mdp);
        for i in 0..m.param_count() {
            m.set_param(i, 4.0 * rng.uniform() - 2.0);
        }
        let exact = VariationalModel::from_exact(&mdp, &pi)?;
        for t in rollout(&mdp, &pi, 50, &mut rng)? {
            let e = one_step_elbo(&m, &pi, &t)?;
            let lm = m.log_marginal(&pi, t.s, t.s_next, t.atom);
            worst = worst.max((lm - e.value - kl_to_model_posterior(&m, &pi, &t)?).abs()).max(e.value - lm);
            let tight = one_step_elbo(&exact, &pi, &t)?.value - exact.log_marginal(&pi, t.s, t.s_next, t.atom);
            worst = worst.max(tight.abs());
            cases += 1;
        }
    }
    Ok(at_most(Check::ElboBound, cases, worst, 1e-9, "ELBO vs log marginal: gap - KL, and tightness at the posterior".into()))
}

fn gradients() -> Result<CheckResult> {
    let mut rng = SeededRng::new(20);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (s, a, k) = (1 + rng.below(5), 1 + rng.below(4), 1 + rng.below(3));
        let mdp = envs::random(s, a, k, 2000 + i)?;
        let pi = PolicyTable::random_positive(s, a, 0.1, &mut rng);
        let mut m = VariationalModel::for_mdp(&mdp);
        for j in 0..m.param_count() {
            m.set_param(j, 4.0 * rng.uniform() - 2.0);
        }
        let t = Transition { s: rng.below(s), a: rng.below(a), atom: rng.below(k), s_next: rng.below(s) };
        worst = worst.max(gradient_check(&m, &pi, &t, 1e-5)?);
    }
    Ok(at_most(Check::Gradients, 100, worst, 1e-5, "relative error against central differences".into()))
}

/// `KL(q_φ(·|s,s',k) ‖ p(a|s,s',k))` against the model's own posterior.
fn kl_to_model_posterior(m: &VariationalModel, pi: &PolicyTable, t: &Transition) -> Result<f64> {
    let w: Vec<f64> = (0..m.n_actions()).map(|a| pi.prob(t.s, a) * m.log_p(t.s, a, t.s_next, t.atom).exp()).collect();
    let z: f64 = w.iter().sum();
    let post: Vec<f64> = w.iter().map(|x| x / z).collect();
    Ok(kl(&m.q_row(t.s, t.s_next, t.atom), &post)?)
}

/// Runs `only` (or everything when empty) with an optional injected defect.
pub fn run_verify(only: &[Check], mutation: Option<Mutation>) -> Result<Report> {
    let selected: Vec<Check> = if only.is_empty() { Check::ALL.to_vec() } else { only.to_vec() };
    let mut checks = Vec::new();
    for c in selected {
        let r = match c {
            Check::Contraction => contraction()?,
            Check::FixedPoint => fixed_point()?,
            Check::Normalizer => normalizer(mutation)?,
            Check::KlIdentities => kl_identities()?,
            Check::Monotonicity => monotonicity(mutation)?,
            Check::Certificate => certificate(mutation)?,
            Check::ElboBound => elbo_bound()?,
            Check::Gradients => gradients()?,
        };
        checks.push(r);
    }
    Ok(Report {
        pass: checks.iter().all(|c| c.pass),
        mutation,
        checks,
    })
}
