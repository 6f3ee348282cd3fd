use serde::Serialize;

use crate::error::{GioError, Result};
use crate::future::{FutureKernel, FutureSpace};
use crate::inference::{kl, posterior_from_kernel};
use crate::mdp::TabularMdp;
use crate::numeric::safe_ln;
use crate::tables::{PolicyTable, QTable, VTable};

use super::improve::{softmax_from_parts, Improvement};
use super::operator::{evaluate_operator, IntrinsicBellman};
use super::{Mutation, SolverConfig};

/// Diagnostics for the policy `π_k` evaluated at sweep `k`.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRecord {
    pub sweep: usize,
    /// `‖𝒯^{π_k} Q_{k−1} − Q_{k−1}‖_∞`, with `Q_{−1} = 0`.
    pub bellman_residual: f64,
    /// `min_{s,a} (Q^{π_k} − Q^{π_{k−1}})`; NaN at sweep 0.
    pub min_q_delta: f64,
    /// `‖Q^{π_k} − Q^{π_{k−1}}‖_∞`; NaN at sweep 0.
    pub q_change: f64,
    pub mi_mean: f64,
    pub objective: f64,
    /// `max_s D_KL(π_k ‖ 𝒢(Q^{π_k}, p^{π_k}))`.
    pub fixed_point_kl: f64,
    pub normalizer_residual: f64,
    pub log_z: Vec<f64>,
    pub eval_iters: usize,
    /// `sup_{s,a} |term_{k−1}(s, a)|` of the convergence-condition series, computed
    /// after the run with the converged policy standing in for `π*`; NaN at
    /// sweep 0.
    pub assumption3_term: f64,
    /// `sup_{s,a} |Σ_{j<k} term_j(s, a)|`.
    pub assumption3_partial_sum: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct IterationTrace {
    pub records: Vec<SweepRecord>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&SweepRecord> {
        self.records.last()
    }

    /// Smallest `min_q_delta` over all sweeps after the first.
    pub fn worst_q_delta(&self) -> f64 {
        self.records.iter().skip(1).map(|r| r.min_q_delta).fold(f64::INFINITY, f64::min)
    }

    pub fn worst_normalizer_residual(&self) -> f64 {
        self.records.iter().map(|r| r.normalizer_residual).fold(0.0, f64::max)
    }

    /// Last increment of the convergence-condition partial sums. Before the final
    /// policy it is the last nontrivial term.
    pub fn assumption3_final_increment(&self) -> f64 {
        let n = self.records.len();
        if n < 3 {
            return 0.0;
        }
        self.records[n - 2].assumption3_term
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub policy: PolicyTable,
    pub q: QTable,
    pub v: VTable,
    pub trace: IterationTrace,
    pub converged: bool,
    /// `π_0, π_1, …` in sweep order.
    pub policies: Vec<PolicyTable>,
    /// `Q^{π_0}, Q^{π_1}, …` in sweep order.
    pub q_history: Vec<QTable>,
}

impl SolveResult {
    /// Number of improvement steps taken.
    pub fn sweeps(&self) -> usize {
        self.trace.len().saturating_sub(1)
    }
}

fn check_shapes(mdp: &TabularMdp, pi: &PolicyTable) -> Result<()> {
    if pi.n_states() != mdp.n_states() || pi.n_actions() != mdp.n_actions() {
        return Err(GioError::DimensionMismatch("policy shape differs from MDP".into()));
    }
    Ok(())
}

fn expected_log_posterior_exact(op: &IntrinsicBellman<'_>) -> Vec<f64> {
    // E_ℱ[log p(a|s,ℱ)] = lr(s,a) + log π(a|s) for the exact posterior.
    op.log_ratio()
        .iter()
        .zip(op.policy().as_slice())
        .map(|(l, p)| l + safe_ln(*p))
        .collect()
}

fn improve(op: &IntrinsicBellman<'_>, q: &QTable, cfg: &SolverConfig) -> Result<Improvement> {
    let mut elp = expected_log_posterior_exact(op);
    if cfg.mutation == Some(Mutation::NegateEta) {
        for e in &mut elp {
            *e = -*e;
        }
    }
    softmax_from_parts(q, &elp, cfg.eta)
}

fn max_state_kl(p: &PolicyTable, g: &PolicyTable) -> Result<f64> {
    let mut worst = 0.0f64;
    for s in 0..p.n_states() {
        worst = worst.max(kl(p.row(s), g.row(s))?);
    }
    Ok(worst)
}

/// Alternates exact evaluation, posterior refresh, and softmax improvement.
///
/// Stops when both `‖Q^{π_k} − Q^{π_{k−1}}‖_∞` and the fixed-point KL of
/// `π_k` drop below `cfg.outer_tol`, or when the sweep budget runs out; in
/// the latter case the last policy is returned with `converged = false`.
pub fn policy_iteration(mdp: &TabularMdp, pi0: &PolicyTable, cfg: &SolverConfig) -> Result<SolveResult> {
    cfg.require_positive_eta()?;
    check_shapes(mdp, pi0)?;
    pi0.require_strictly_positive()?;
    let space = FutureSpace::new(mdp, cfg.future)?;
    let needs_policy = cfg.future.needs_policy();

    let mut kernel = FutureKernel::build(mdp, &space, pi0)?;
    let mut op = IntrinsicBellman::exact_with_kernel(mdp, pi0, &kernel, cfg.eta);
    let mut ev = evaluate_operator(&op, None, cfg.eval_tol, cfg.eval_max_iters)?;
    let mut bellman_residual = ev.residuals[0];

    let mut records = Vec::new();
    let mut policies = vec![pi0.clone()];
    let mut q_history = vec![ev.q.clone()];
    let mut converged = false;

    for k in 0.. {
        let imp = improve(&op, &ev.q, cfg)?;
        let pi_k = op.policy().clone();
        let fixed_point_kl = max_state_kl(&pi_k, &imp.policy)?;
        let mi = op.information();
        let (q_change, min_q_delta) = if k == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let prev = &q_history[k - 1];
            (ev.q.sup_dist(prev), ev.q.min_diff(prev))
        };
        records.push(SweepRecord {
            sweep: k,
            bellman_residual,
            min_q_delta,
            q_change,
            mi_mean: mi.iter().sum::<f64>() / mi.len() as f64,
            objective: mdp.initial_dist().iter().zip(&ev.v).map(|(p, v)| p * v).sum(),
            fixed_point_kl,
            normalizer_residual: imp.normalizer_residual,
            log_z: imp.log_z.clone(),
            eval_iters: ev.residuals.len(),
            assumption3_term: f64::NAN,
            assumption3_partial_sum: 0.0,
        });
        log::debug!(
            "sweep {k}: q_change {q_change:e} fixed_point_kl {fixed_point_kl:e} eval_iters {}",
            ev.residuals.len()
        );
        if k > 0 && q_change < cfg.outer_tol && fixed_point_kl < cfg.outer_tol {
            converged = true;
            break;
        }
        if k + 1 >= cfg.outer_max_sweeps {
            break;
        }
        let next = imp.policy;
        if needs_policy {
            kernel = FutureKernel::build(mdp, &space, &next)?;
        }
        op = IntrinsicBellman::exact_with_kernel(mdp, &next, &kernel, cfg.eta);
        bellman_residual = op.apply(&ev.q).sup_dist(&ev.q);
        ev = evaluate_operator(&op, Some(&ev.q), cfg.eval_tol, cfg.eval_max_iters)?;
        policies.push(next);
        q_history.push(ev.q.clone());
    }

    if !converged {
        log::warn!(
            "policy iteration stopped after {} sweeps without meeting tolerance {:e}",
            records.len(),
            cfg.outer_tol
        );
    }

    let pi_star = policies.last().expect("at least one policy").clone();
    let (terms, partials) = assumption3_terms(mdp, &space, &policies, &q_history, &pi_star, cfg.eta)?;
    for (k, (t, p)) in terms.iter().zip(&partials).enumerate() {
        records[k + 1].assumption3_term = *t;
        records[k + 1].assumption3_partial_sum = *p;
    }

    Ok(SolveResult {
        policy: pi_star,
        q: ev.q,
        v: ev.v,
        trace: IterationTrace { records },
        converged,
        policies,
        q_history,
    })
}

/// Sup-norms of the convergence-condition series terms and of their partial sums.
///
/// Term `k` is
/// `E_{s'∼P(·|s,a)} E_{(a',ℱ') ∼ p^{π*} − p^{π_{k+1}}}[η (log p^{π*}(a'|ℱ',s') − log π*(a'|s')) + Q^{π_k}(s',a')]`
/// for `k = 0 .. policies.len() − 2`.
pub fn assumption3_terms(
    mdp: &TabularMdp,
    space: &FutureSpace,
    policies: &[PolicyTable],
    q_history: &[QTable],
    pi_star: &PolicyTable,
    eta: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if policies.len() != q_history.len() {
        return Err(GioError::DimensionMismatch("policy and Q histories differ in length".into()));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let star_kernel = FutureKernel::build(mdp, space, pi_star)?;
    let (star_post, _) = posterior_from_kernel(&star_kernel, pi_star);
    let g = |s: usize, o: usize, a: usize| {
        eta * (safe_ln(star_post.prob(s, o, a).unwrap_or(0.0)) - safe_ln(pi_star.prob(s, a)))
    };
    let h_under = |kernel: &FutureKernel, s: usize, a: usize| -> f64 {
        kernel.row(s, a).iter().map(|&(o, p)| p * g(s, o, a)).sum()
    };
    let h_star: Vec<f64> = (0..ns * na).map(|i| h_under(&star_kernel, i / na, i % na)).collect();

    let mut partial = vec![0.0; ns * na];
    let mut terms = Vec::new();
    let mut partials = Vec::new();
    for k in 0..policies.len().saturating_sub(1) {
        let next = &policies[k + 1];
        let q = &q_history[k];
        let next_kernel;
        let h_next: Vec<f64> = if space.kind().needs_policy() {
            next_kernel = FutureKernel::build(mdp, space, next)?;
            (0..ns * na).map(|i| h_under(&next_kernel, i / na, i % na)).collect()
        } else {
            h_star.clone()
        };
        let d: Vec<f64> = (0..ns)
            .map(|sn| {
                (0..na)
                    .map(|an| {
                        let i = sn * na + an;
                        pi_star.prob(sn, an) * (h_star[i] + q.get(sn, an)) - next.prob(sn, an) * (h_next[i] + q.get(sn, an))
                    })
                    .sum()
            })
            .collect();
        let mut sup_term = 0.0f64;
        let mut sup_partial = 0.0f64;
        for s in 0..ns {
            for a in 0..na {
                let t: f64 = mdp.transition_row(s, a).iter().zip(&d).map(|(p, x)| p * x).sum();
                partial[s * na + a] += t;
                sup_term = sup_term.max(t.abs());
                sup_partial = sup_partial.max(partial[s * na + a].abs());
            }
        }
        terms.push(sup_term);
        partials.push(sup_partial);
    }
    Ok((terms, partials))
}

/// The three tables of the monotonicity chain `Q^π ≤ Q^{π̃,p^π} ≤ Q^{π̃}`.
#[derive(Clone, Debug)]
pub struct MonotonicityReport {
    pub improved: PolicyTable,
    pub q_pi: QTable,
    pub q_frozen: QTable,
    pub q_improved: QTable,
    /// `min (Q^{π̃,p^π} − Q^π)`.
    pub gap_frozen: f64,
    /// `min (Q^{π̃} − Q^{π̃,p^π})`.
    pub gap_refresh: f64,
    /// `min (Q^{π̃} − Q^π)`.
    pub gap_total: f64,
    /// `max |Q^{π̃} − Q^π|`.
    pub max_abs_change: f64,
}

impl MonotonicityReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.gap_frozen >= -tol && self.gap_refresh >= -tol && self.gap_total >= -tol
    }
}

/// One improvement step from `pi`, then full re-evaluation of the result,
/// with the frozen-posterior table in between.
pub fn verify_monotonicity(mdp: &TabularMdp, pi: &PolicyTable, cfg: &SolverConfig) -> Result<MonotonicityReport> {
    cfg.require_positive_eta()?;
    check_shapes(mdp, pi)?;
    pi.require_strictly_positive()?;
    let space = FutureSpace::new(mdp, cfg.future)?;
    let kernel = FutureKernel::build(mdp, &space, pi)?;
    let op = IntrinsicBellman::exact_with_kernel(mdp, pi, &kernel, cfg.eta);
    let q_pi = evaluate_operator(&op, None, cfg.eval_tol, cfg.eval_max_iters)?.q;
    let improved = improve(&op, &q_pi, cfg)?.policy;

    let (post_pi, _) = posterior_from_kernel(&kernel, pi);
    let frozen = IntrinsicBellman::with_posterior(mdp, &improved, &post_pi, &space, cfg.eta)?;
    let q_frozen = evaluate_operator(&frozen, None, cfg.eval_tol, cfg.eval_max_iters)?.q;

    let next_kernel = FutureKernel::build(mdp, &space, &improved)?;
    let refreshed = IntrinsicBellman::exact_with_kernel(mdp, &improved, &next_kernel, cfg.eta);
    let q_improved = evaluate_operator(&refreshed, None, cfg.eval_tol, cfg.eval_max_iters)?.q;

    Ok(MonotonicityReport {
        gap_frozen: q_frozen.min_diff(&q_pi),
        gap_refresh: q_improved.min_diff(&q_frozen),
        gap_total: q_improved.min_diff(&q_pi),
        max_abs_change: q_improved.sup_dist(&q_pi),
        improved,
        q_pi,
        q_frozen,
        q_improved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::future::FutureKind;
    use crate::mdp::tests::two_by_two;

    #[test]
    fn converges_with_certificates() {
        let m = two_by_two();
        let cfg = SolverConfig::with_eta(0.5);
        let res = policy_iteration(&m, &PolicyTable::uniform(2, 2), &cfg).unwrap();
        assert!(res.converged);
        let last = res.trace.last().unwrap();
        assert!(last.fixed_point_kl < 1e-8);
        assert!(res.trace.worst_q_delta() >= -1e-8);
        assert!(res.trace.worst_normalizer_residual() < 1e-9);
    }

    #[test]
    fn monotonicity_chain_on_uniform() {
        let m = two_by_two();
        for kind in [FutureKind::OneStep, FutureKind::NextStateOnly, FutureKind::KStep(2)] {
            let cfg = SolverConfig {
                future: kind,
                ..SolverConfig::with_eta(0.8)
            };
            let rep = verify_monotonicity(&m, &PolicyTable::uniform(2, 2), &cfg).unwrap();
            assert!(rep.holds(1e-9), "{kind}: {rep:?}");
        }
    }

    #[test]
    fn budget_exhaustion_flags_non_convergence() {
        let m = two_by_two();
        let cfg = SolverConfig {
            outer_max_sweeps: 2,
            ..SolverConfig::with_eta(0.5)
        };
        let res = policy_iteration(&m, &PolicyTable::uniform(2, 2), &cfg).unwrap();
        assert!(!res.converged);
        assert_eq!(res.trace.len(), 2);
    }
}
