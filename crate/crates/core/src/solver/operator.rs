use crate::error::{GioError, Result};
use crate::future::{FutureKernel, FutureSpace};
use crate::inference::{log_ratio_table, log_ratio_table_with, posterior_from_kernel, PosteriorTable};
use crate::mdp::TabularMdp;
use crate::tables::{PolicyTable, QTable, VTable};

use super::SolverConfig;

/// `𝒯^π` for a fixed policy and posterior.
///
/// The posterior enters only through the log-ratio table
/// `lr(s, a) = E_ℱ[log p(a | s, ℱ) − log π(a | s)]`, so it is computed once
/// and every application is a dense `O(S²A)` pass.
#[derive(Clone, Debug)]
pub struct IntrinsicBellman<'a> {
    mdp: &'a TabularMdp,
    policy: PolicyTable,
    log_ratio: Vec<f64>,
    r_bar: Vec<f64>,
    eta: f64,
}

impl<'a> IntrinsicBellman<'a> {
    /// Operator with the exact posterior of `pi`.
    pub fn exact(mdp: &'a TabularMdp, pi: &PolicyTable, space: &FutureSpace, eta: f64) -> Result<Self> {
        let kernel = FutureKernel::build(mdp, space, pi)?;
        Ok(Self::exact_with_kernel(mdp, pi, &kernel, eta))
    }

    pub(crate) fn exact_with_kernel(mdp: &'a TabularMdp, pi: &PolicyTable, kernel: &FutureKernel, eta: f64) -> Self {
        let (_, marg) = posterior_from_kernel(kernel, pi);
        let log_ratio = log_ratio_table(kernel, &marg);
        Self::from_parts_unchecked(mdp, pi.clone(), log_ratio, eta)
    }

    /// Operator whose bonus reads an arbitrary posterior table, exact or not.
    /// Outcomes are still drawn from the true likelihood under `pi`.
    pub fn with_posterior(
        mdp: &'a TabularMdp,
        pi: &PolicyTable,
        post: &PosteriorTable,
        space: &FutureSpace,
        eta: f64,
    ) -> Result<Self> {
        if post.n_states() != mdp.n_states() || post.n_actions() != mdp.n_actions() || post.n_outcomes() != space.len() {
            return Err(GioError::DimensionMismatch("posterior table does not match MDP and future space".into()));
        }
        let kernel = FutureKernel::build(mdp, space, pi)?;
        let log_ratio = log_ratio_table_with(&kernel, post, pi);
        Ok(Self::from_parts_unchecked(mdp, pi.clone(), log_ratio, eta))
    }

    /// Operator from a precomputed log-ratio table.
    pub fn from_parts(mdp: &'a TabularMdp, pi: PolicyTable, log_ratio: Vec<f64>, eta: f64) -> Result<Self> {
        if pi.n_states() != mdp.n_states() || pi.n_actions() != mdp.n_actions() {
            return Err(GioError::DimensionMismatch("policy shape differs from MDP".into()));
        }
        if log_ratio.len() != mdp.n_states() * mdp.n_actions() {
            return Err(GioError::DimensionMismatch("log-ratio table has the wrong size".into()));
        }
        Ok(Self::from_parts_unchecked(mdp, pi, log_ratio, eta))
    }

    fn from_parts_unchecked(mdp: &'a TabularMdp, policy: PolicyTable, log_ratio: Vec<f64>, eta: f64) -> Self {
        Self {
            mdp,
            policy,
            log_ratio,
            r_bar: mdp.expected_rewards(),
            eta,
        }
    }

    pub fn mdp(&self) -> &TabularMdp {
        self.mdp
    }

    pub fn policy(&self) -> &PolicyTable {
        &self.policy
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn log_ratio(&self) -> &[f64] {
        &self.log_ratio
    }

    /// `Σ_a π(a|s) lr(s, a)`: the mutual information when the posterior is exact.
    pub fn information(&self) -> Vec<f64> {
        let na = self.mdp.n_actions();
        (0..self.mdp.n_states())
            .map(|s| {
                let lr = &self.log_ratio[s * na..(s + 1) * na];
                self.policy.row(s).iter().zip(lr).map(|(p, l)| p * l).sum()
            })
            .collect()
    }

    /// `V(s) = E_{a∼π, ℱ}[Q(s, a) + η (log p(a|s,ℱ) − log π(a|s))]`.
    pub fn value(&self, q: &QTable) -> VTable {
        let na = self.mdp.n_actions();
        (0..self.mdp.n_states())
            .map(|s| {
                let lr = &self.log_ratio[s * na..(s + 1) * na];
                self.policy
                    .row(s)
                    .iter()
                    .zip(q.row(s))
                    .zip(lr)
                    .map(|((p, qv), l)| p * (qv + self.eta * l))
                    .sum()
            })
            .collect()
    }

    /// `r̄(s, a) + γ E_{s'}[V(s')]`.
    pub fn apply(&self, q: &QTable) -> QTable {
        let mut out = QTable::zeros(self.mdp.n_states(), self.mdp.n_actions());
        self.apply_into(q, &mut out);
        out
    }

    pub fn apply_into(&self, q: &QTable, out: &mut QTable) {
        let v = self.value(q);
        let (ns, na) = (self.mdp.n_states(), self.mdp.n_actions());
        let gamma = self.mdp.gamma();
        let dst = out.as_mut_slice();
        for s in 0..ns {
            for a in 0..na {
                let ev: f64 = self.mdp.transition_row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
                dst[s * na + a] = self.r_bar[s * na + a] + gamma * ev;
            }
        }
    }

    /// `r̃(s, a) = r̄(s, a) + γ η E_{s', a'∼π, ℱ'}[log p(a'|s',ℱ') − log π(a'|s')]`.
    pub fn merged_reward(&self) -> Vec<f64> {
        let (ns, na) = (self.mdp.n_states(), self.mdp.n_actions());
        let gamma = self.mdp.gamma();
        let bonus: Vec<f64> = self.information();
        let mut out = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let mut acc = 0.0;
                for (sn, &p) in self.mdp.transition_row(s, a).iter().enumerate() {
                    acc += p * bonus[sn];
                }
                out[s * na + a] = self.r_bar[s * na + a] + gamma * self.eta * acc;
            }
        }
        out
    }

    /// The same operator written as `r̃ + γ E_{s', a'∼π}[Q(s', a')]`.
    pub fn apply_merged(&self, q: &QTable) -> QTable {
        let (ns, na) = (self.mdp.n_states(), self.mdp.n_actions());
        let gamma = self.mdp.gamma();
        let r_tilde = self.merged_reward();
        let mut out = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let mut acc = 0.0;
                for (sn, &p) in self.mdp.transition_row(s, a).iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let inner: f64 = self.policy.row(sn).iter().zip(q.row(sn)).map(|(pa, qv)| pa * qv).sum();
                    acc += p * inner;
                }
                out[s * na + a] = r_tilde[s * na + a] + gamma * acc;
            }
        }
        QTable::from_vec(ns, na, out).expect("finite inputs give finite outputs")
    }
}

/// One application of `𝒯^π` with the given posterior.
pub fn apply_bellman(
    mdp: &TabularMdp,
    q: &QTable,
    pi: &PolicyTable,
    post: &PosteriorTable,
    space: &FutureSpace,
    cfg: &SolverConfig,
) -> Result<QTable> {
    cfg.validate()?;
    if !q.same_shape(mdp.n_states(), mdp.n_actions()) {
        return Err(GioError::DimensionMismatch("Q table shape differs from MDP".into()));
    }
    Ok(IntrinsicBellman::with_posterior(mdp, pi, post, space, cfg.eta)?.apply(q))
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub q: QTable,
    pub v: VTable,
    /// `‖Q_{i+1} − Q_i‖_∞` after every application.
    pub residuals: Vec<f64>,
}

/// Iterates the operator to its fixed point.
///
/// Stops once the last residual `r` satisfies `max(r, γ r / (1 − γ)) < tol`;
/// the second term bounds the remaining distance to the fixed point.
pub fn evaluate_operator(op: &IntrinsicBellman<'_>, q0: Option<&QTable>, tol: f64, max_iters: usize) -> Result<Evaluation> {
    let (ns, na) = (op.mdp.n_states(), op.mdp.n_actions());
    let gamma = op.mdp.gamma();
    let mut q = match q0 {
        Some(q0) if q0.same_shape(ns, na) => q0.clone(),
        Some(_) => return Err(GioError::DimensionMismatch("initial Q has the wrong shape".into())),
        None => QTable::zeros(ns, na),
    };
    let mut next = QTable::zeros(ns, na);
    let mut residuals = Vec::new();
    for _ in 0..max_iters {
        op.apply_into(&q, &mut next);
        let r = next.sup_dist(&q);
        if !r.is_finite() {
            return Err(GioError::NotConverged {
                iters: residuals.len() + 1,
                residual: r,
            });
        }
        residuals.push(r);
        std::mem::swap(&mut q, &mut next);
        if r.max(gamma * r / (1.0 - gamma)) < tol {
            let v = op.value(&q);
            return Ok(Evaluation { q, v, residuals });
        }
    }
    Err(GioError::NotConverged {
        iters: max_iters,
        residual: residuals.last().copied().unwrap_or(f64::NAN),
    })
}

/// `Q^π` and `V^π` under the exact posterior of `pi`.
pub fn evaluate_policy(mdp: &TabularMdp, pi: &PolicyTable, cfg: &SolverConfig) -> Result<Evaluation> {
    cfg.validate()?;
    pi.require_strictly_positive()?;
    let space = FutureSpace::new(mdp, cfg.future)?;
    let op = IntrinsicBellman::exact(mdp, pi, &space, cfg.eta)?;
    evaluate_operator(&op, None, cfg.eval_tol, cfg.eval_max_iters)
}

/// `Q^{π̃, p^π}`: actions follow `pi_new` but the bonus reads the posterior
/// of `pi_old`.
pub fn evaluate_frozen(mdp: &TabularMdp, pi_new: &PolicyTable, pi_old: &PolicyTable, cfg: &SolverConfig) -> Result<Evaluation> {
    cfg.validate()?;
    let space = FutureSpace::new(mdp, cfg.future)?;
    let old_kernel = FutureKernel::build(mdp, &space, pi_old)?;
    let (post, _) = posterior_from_kernel(&old_kernel, pi_old);
    let op = IntrinsicBellman::with_posterior(mdp, pi_new, &post, &space, cfg.eta)?;
    evaluate_operator(&op, None, cfg.eval_tol, cfg.eval_max_iters)
}

/// `E_{s0∼ρ0}[V^π(s0)]`.
pub fn objective_value(mdp: &TabularMdp, pi: &PolicyTable, cfg: &SolverConfig) -> Result<f64> {
    let ev = evaluate_policy(mdp, pi, cfg)?;
    Ok(mdp.initial_dist().iter().zip(&ev.v).map(|(p, v)| p * v).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::future::FutureKind;
    use crate::mdp::tests::two_by_two;

    #[test]
    fn gamma_zero_returns_expected_reward() {
        let m = two_by_two().with_gamma(0.0).unwrap();
        let pi = PolicyTable::uniform(2, 2);
        let space = FutureSpace::new(&m, FutureKind::OneStep).unwrap();
        let op = IntrinsicBellman::exact(&m, &pi, &space, 1.0).unwrap();
        let q = QTable::from_vec(2, 2, vec![5.0, -3.0, 2.0, 7.0]).unwrap();
        assert_eq!(op.apply(&q).as_slice(), m.expected_rewards().as_slice());
    }

    #[test]
    fn merged_form_matches() {
        let m = two_by_two();
        let pi = PolicyTable::from_rows(vec![vec![0.2, 0.8], vec![0.7, 0.3]]).unwrap();
        let space = FutureSpace::new(&m, FutureKind::OneStep).unwrap();
        let op = IntrinsicBellman::exact(&m, &pi, &space, 0.7).unwrap();
        let q = QTable::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        assert!(op.apply(&q).sup_dist(&op.apply_merged(&q)) < 1e-12);
    }

    #[test]
    fn geometric_series_fixed_point() {
        let m = TabularMdp::new(1, 1, 0.5, vec![1.0], vec![1.0], vec![1.0], vec![1.0]).unwrap();
        let ev = evaluate_policy(&m, &PolicyTable::uniform(1, 1), &SolverConfig::default()).unwrap();
        assert!((ev.q.get(0, 0) - 2.0).abs() < 1e-10);
        assert!(*ev.residuals.last().unwrap() < 1e-10);
    }

    #[test]
    fn residuals_contract() {
        let m = two_by_two();
        let ev = evaluate_policy(&m, &PolicyTable::uniform(2, 2), &SolverConfig::default()).unwrap();
        // Each residual is a difference of O(‖Q‖) numbers, so allow a few ulps of it.
        let slack = 64.0 * f64::EPSILON * ev.q.as_slice().iter().fold(1.0f64, |m, x| m.max(x.abs()));
        for w in ev.residuals.windows(2) {
            assert!(w[1] <= (m.gamma() + 1e-9) * w[0] + slack, "{w:?}");
        }
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let m = two_by_two();
        let cfg = SolverConfig {
            eval_max_iters: 3,
            ..SolverConfig::default()
        };
        assert!(matches!(
            evaluate_policy(&m, &PolicyTable::uniform(2, 2), &cfg),
            Err(GioError::NotConverged { iters: 3, .. })
        ));
    }
}
