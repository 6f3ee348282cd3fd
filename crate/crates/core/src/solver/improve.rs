use crate::error::{GioError, Result};
use crate::future::{FutureKernel, FutureSpace};
use crate::inference::{kl, PosteriorTable};
use crate::mdp::TabularMdp;
use crate::numeric::{log_sum_exp, safe_ln};
use crate::tables::{PolicyTable, QTable};

use super::SolverConfig;

#[derive(Clone, Debug)]
pub struct Improvement {
    pub policy: PolicyTable,
    /// `log Z(s)` of the normalizer, so that `η log Z(s)` is the optimal
    /// one-step value.
    pub log_z: Vec<f64>,
    /// Worst violation of `Q + η E[log p] = η (log π̃ + log Z)` over
    /// entries with `π̃ > 1e-12`.
    pub normalizer_residual: f64,
}

/// `E_ℱ[log p(a | s, ℱ)]` under the true likelihood, for every `(s, a)`.
pub fn expected_log_posterior(kernel: &FutureKernel, post: &PosteriorTable) -> Vec<f64> {
    let (ns, na) = (kernel.n_states(), kernel.n_actions());
    let mut out = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            out[s * na + a] = kernel
                .row(s, a)
                .iter()
                .map(|&(o, p)| p * safe_ln(post.prob(s, o, a).unwrap_or(0.0)))
                .sum();
        }
    }
    out
}

/// `π̃(a|s) ∝ exp((Q(s,a) + η elp(s,a)) / η)` given the expected log
/// posterior `elp`.
pub fn softmax_from_parts(q: &QTable, elp: &[f64], eta: f64) -> Result<Improvement> {
    let (ns, na) = (q.n_states(), q.n_actions());
    if elp.len() != ns * na {
        return Err(GioError::DimensionMismatch("expected-log-posterior table has the wrong size".into()));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(GioError::InvalidConfig(format!("softmax improvement needs eta > 0, got {eta}")));
    }
    let mut probs = vec![0.0; ns * na];
    let mut log_z = vec![0.0; ns];
    let mut logits = vec![0.0; na];
    for s in 0..ns {
        for a in 0..na {
            logits[a] = (q.get(s, a) + eta * elp[s * na + a]) / eta;
        }
        let lse = log_sum_exp(&logits);
        if !lse.is_finite() {
            return Err(GioError::DegenerateSoftmax { state: s });
        }
        log_z[s] = lse;
        for a in 0..na {
            probs[s * na + a] = (logits[a] - lse).exp();
        }
        // Renormalize so the row-sum invariant holds to the last ulp.
        let total: f64 = probs[s * na..(s + 1) * na].iter().sum();
        for p in &mut probs[s * na..(s + 1) * na] {
            *p /= total;
        }
    }
    let policy = PolicyTable::new(ns, na, probs)?;
    let normalizer_residual = normalizer_residual(q, elp, eta, &policy, &log_z);
    Ok(Improvement {
        policy,
        log_z,
        normalizer_residual,
    })
}

fn normalizer_residual(q: &QTable, elp: &[f64], eta: f64, policy: &PolicyTable, log_z: &[f64]) -> f64 {
    let na = q.n_actions();
    let mut worst = 0.0f64;
    for (s, lz) in log_z.iter().enumerate() {
        for a in 0..na {
            let p = policy.prob(s, a);
            if p > 1e-12 {
                let lhs = q.get(s, a) + eta * elp[s * na + a];
                let rhs = eta * (p.ln() + lz);
                worst = worst.max((lhs - rhs).abs());
            }
        }
    }
    worst
}

/// Softmax improvement against a posterior computed for `pi_prev`.
pub fn softmax_improve(
    q: &QTable,
    post: &PosteriorTable,
    pi_prev: &PolicyTable,
    mdp: &TabularMdp,
    space: &FutureSpace,
    cfg: &SolverConfig,
) -> Result<Improvement> {
    cfg.require_positive_eta()?;
    let kernel = FutureKernel::build(mdp, space, pi_prev)?;
    let elp = expected_log_posterior(&kernel, post);
    softmax_from_parts(q, &elp, cfg.eta)
}

/// `Σ_a ρ(a) (Q(a) + η elp(a) − η log ρ(a))` at one state: the quantity
/// the softmax policy maximizes over the simplex.
pub fn one_step_objective(q_row: &[f64], elp_row: &[f64], eta: f64, rho: &[f64]) -> f64 {
    rho.iter()
        .zip(q_row)
        .zip(elp_row)
        .filter(|((r, _), _)| **r > 0.0)
        .map(|((r, qv), e)| r * (qv + eta * e - eta * r.ln()))
        .sum()
}

/// The policy class `Π` for the KL projection.
#[derive(Clone, Debug)]
pub enum PolicyClass {
    /// Every stochastic policy.
    Tabular,
    /// Tabular policies with every entry at least `eps`.
    Floored { eps: f64 },
    /// An explicit finite set of policies.
    Candidates(Vec<PolicyTable>),
}

#[derive(Clone, Debug)]
pub struct Projection {
    pub policy: PolicyTable,
    /// `D_KL(π'(·|s) ‖ G(·|s))` per state.
    pub kl: Vec<f64>,
    pub mean_kl: f64,
}

/// `argmin_{π' ∈ Π} D_KL(π'(·|s) ‖ G(·|s))` for every state.
pub fn project_policy(class: &PolicyClass, g: &PolicyTable) -> Result<Projection> {
    g.validate()?;
    let policy = match class {
        PolicyClass::Tabular => g.clone(),
        PolicyClass::Floored { eps } => {
            let na = g.n_actions();
            if !(*eps >= 0.0 && eps * na as f64 <= 1.0) {
                return Err(GioError::InvalidConfig(format!("floor {eps} infeasible for {na} actions")));
            }
            let mut probs = Vec::with_capacity(g.n_states() * na);
            for s in 0..g.n_states() {
                probs.extend(floored_projection(g.row(s), *eps));
            }
            PolicyTable::new(g.n_states(), na, probs)?
        }
        PolicyClass::Candidates(cands) => {
            if cands.is_empty() {
                return Err(GioError::Empty("policy class"));
            }
            let mut best: Option<(f64, &PolicyTable)> = None;
            for c in cands {
                if c.n_states() != g.n_states() || c.n_actions() != g.n_actions() {
                    return Err(GioError::DimensionMismatch("candidate policy shape differs".into()));
                }
                let total = per_state_kl(c, g)?.iter().sum::<f64>();
                if best.is_none_or(|(b, _)| total < b) {
                    best = Some((total, c));
                }
            }
            best.expect("nonempty").1.clone()
        }
    };
    let kl = per_state_kl(&policy, g)?;
    let mean_kl = kl.iter().sum::<f64>() / kl.len().max(1) as f64;
    Ok(Projection { policy, kl, mean_kl })
}

fn per_state_kl(p: &PolicyTable, g: &PolicyTable) -> Result<Vec<f64>> {
    (0..p.n_states()).map(|s| kl(p.row(s), g.row(s))).collect()
}

/// KKT solution `p_a = max(ε, c g_a)` with `c` set by bisection so the row sums to one.
fn floored_projection(g: &[f64], eps: f64) -> Vec<f64> {
    let mass = |c: f64| g.iter().map(|&x| (c * x).max(eps)).sum::<f64>();
    let (mut lo, mut hi) = (0.0, 1.0);
    while mass(hi) < 1.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut p: Vec<f64> = g.iter().map(|&x| (hi * x).max(eps)).collect();
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_three_to_one() {
        let eta = 0.5;
        let q = QTable::from_vec(1, 2, vec![0.0, eta * 3f64.ln()]).unwrap();
        let imp = softmax_from_parts(&q, &[0.0, 0.0], eta).unwrap();
        assert!((imp.policy.prob(0, 0) - 0.25).abs() < 1e-15);
        assert!((imp.policy.prob(0, 1) - 0.75).abs() < 1e-15);
        assert!(imp.normalizer_residual < 1e-12);
    }

    #[test]
    fn constant_q_uniform_posterior_gives_uniform() {
        let q = QTable::from_vec(1, 3, vec![2.0; 3]).unwrap();
        let elp = vec![(1.0f64 / 3.0).ln(); 3];
        let imp = softmax_from_parts(&q, &elp, 1.3).unwrap();
        for a in 0..3 {
            assert!((imp.policy.prob(0, a) - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_value_is_eta_log_z() {
        let eta = 0.8;
        let q = QTable::from_vec(1, 3, vec![0.3, -1.0, 2.0]).unwrap();
        let elp = vec![-0.2, -1.5, -0.7];
        let imp = softmax_from_parts(&q, &elp, eta).unwrap();
        let v = one_step_objective(q.row(0), &elp, eta, imp.policy.row(0));
        assert!((v - eta * imp.log_z[0]).abs() < 1e-12);
    }

    #[test]
    fn zero_eta_rejected() {
        let q = QTable::zeros(1, 2);
        assert!(softmax_from_parts(&q, &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn tabular_projection_is_identity() {
        let g = PolicyTable::from_rows(vec![vec![0.1, 0.9], vec![0.5, 0.5]]).unwrap();
        let p = project_policy(&PolicyClass::Tabular, &g).unwrap();
        assert_eq!(p.policy, g);
        assert_eq!(p.mean_kl, 0.0);
    }

    #[test]
    fn singleton_class_reports_mean_kl() {
        let g = PolicyTable::from_rows(vec![vec![0.1, 0.9], vec![0.5, 0.5]]).unwrap();
        let u = PolicyTable::uniform(2, 2);
        let p = project_policy(&PolicyClass::Candidates(vec![u.clone()]), &g).unwrap();
        assert_eq!(p.policy, u);
        let expect = (kl(&[0.5, 0.5], &[0.1, 0.9]).unwrap() + 0.0) / 2.0;
        assert!((p.mean_kl - expect).abs() < 1e-15);
        assert!(matches!(project_policy(&PolicyClass::Candidates(vec![]), &g), Err(GioError::Empty(_))));
    }

    #[test]
    fn floor_is_respected() {
        let g = PolicyTable::from_rows(vec![vec![1e-6, 0.3, 0.7 - 1e-6]]).unwrap();
        let p = project_policy(&PolicyClass::Floored { eps: 1e-3 }, &g).unwrap();
        assert!((p.policy.prob(0, 0) - 1e-3).abs() < 1e-15);
        // The unclamped entries keep their ratio.
        let r = p.policy.prob(0, 1) / p.policy.prob(0, 2);
        assert!((r - 0.3 / (0.7 - 1e-6)).abs() < 1e-12);
    }
}
