//! Standard tabular algorithms written independently of the solver, used as
//! oracles: plain expectation backups, value iteration, policy iteration, and
//! maximum-entropy (soft) policy iteration.
//!
//! Evaluation here is a direct linear solve of `(I − γ P_π) Q = b`, so these
//! share no code path with the iterative intrinsic solver.

use nalgebra::{DMatrix, DVector};

use crate::error::{GioError, Result};
use crate::mdp::TabularMdp;
use crate::numeric::argmax;
use crate::tables::{PolicyTable, QTable};

/// `r̄(s,a) + γ Σ_{s'} P(s'|s,a) Σ_{a'} π(a'|s') Q(s',a')`.
pub fn expectation_backup(mdp: &TabularMdp, q: &QTable, pi: &PolicyTable) -> QTable {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut out = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let mut cont = 0.0;
            for sn in 0..ns {
                let p = mdp.transition_row(s, a)[sn];
                for an in 0..na {
                    cont += p * pi.prob(sn, an) * q.get(sn, an);
                }
            }
            out[s * na + a] = mdp.expected_reward(s, a) + mdp.gamma() * cont;
        }
    }
    QTable::from_vec(ns, na, out).expect("finite")
}

/// Solves `Q = b + γ P_π Q` exactly, where `(P_π Q)(s,a) = Σ P(s'|s,a) π(a'|s') Q(s',a')`.
pub fn solve_linear(mdp: &TabularMdp, pi: &PolicyTable, b: &[f64]) -> Result<QTable> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let n = ns * na;
    if b.len() != n {
        return Err(GioError::DimensionMismatch("right-hand side has the wrong size".into()));
    }
    let gamma = mdp.gamma();
    let mut m = DMatrix::<f64>::identity(n, n);
    for s in 0..ns {
        for a in 0..na {
            let row = s * na + a;
            for (sn, &p) in mdp.transition_row(s, a).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for an in 0..na {
                    m[(row, sn * na + an)] -= gamma * p * pi.prob(sn, an);
                }
            }
        }
    }
    let x = m
        .lu()
        .solve(&DVector::from_column_slice(b))
        .ok_or_else(|| GioError::InvalidMdp(vec!["singular evaluation system".into()]))?;
    QTable::from_vec(ns, na, x.as_slice().to_vec())
}

/// `Q^π` of the plain discounted return.
pub fn standard_q(mdp: &TabularMdp, pi: &PolicyTable) -> Result<QTable> {
    solve_linear(mdp, pi, &mdp.expected_rewards())
}

#[derive(Clone, Debug)]
pub struct ValueIteration {
    pub v: Vec<f64>,
    pub q: QTable,
    pub policy: PolicyTable,
    pub iters: usize,
}

/// Optimal values by repeated max-backups until `γ r / (1 − γ) < tol`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64, max_iters: usize) -> Result<ValueIteration> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.gamma();
    let rbar = mdp.expected_rewards();
    let mut v = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    for iter in 1..=max_iters {
        for s in 0..ns {
            for a in 0..na {
                let ev: f64 = mdp.transition_row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
                q[s * na + a] = rbar[s * na + a] + gamma * ev;
            }
        }
        let mut resid = 0.0f64;
        for s in 0..ns {
            let best = q[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            resid = resid.max((best - v[s]).abs());
            v[s] = best;
        }
        if resid.max(gamma * resid / (1.0 - gamma)) < tol {
            let policy = greedy(ns, na, &q);
            return Ok(ValueIteration {
                v,
                q: QTable::from_vec(ns, na, q)?,
                policy,
                iters: iter,
            });
        }
    }
    Err(GioError::NotConverged {
        iters: max_iters,
        residual: f64::NAN,
    })
}

fn greedy(ns: usize, na: usize, q: &[f64]) -> PolicyTable {
    let mut probs = vec![0.0; ns * na];
    for s in 0..ns {
        probs[s * na + argmax(&q[s * na..(s + 1) * na])] = 1.0;
    }
    PolicyTable::new(ns, na, probs).expect("one-hot rows")
}

#[derive(Clone, Debug)]
pub struct PolicyIterationResult {
    pub policies: Vec<PolicyTable>,
    pub q_history: Vec<QTable>,
    pub converged: bool,
}

impl PolicyIterationResult {
    pub fn policy(&self) -> &PolicyTable {
        self.policies.last().expect("nonempty")
    }

    pub fn q(&self) -> &QTable {
        self.q_history.last().expect("nonempty")
    }
}

/// Howard policy iteration with greedy improvement (lowest index on ties).
pub fn standard_policy_iteration(mdp: &TabularMdp, pi0: &PolicyTable, max_sweeps: usize) -> Result<PolicyIterationResult> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut policies = vec![pi0.clone()];
    let mut q_history = vec![standard_q(mdp, pi0)?];
    for _ in 0..max_sweeps {
        let q = q_history.last().expect("nonempty");
        let mut next = greedy(ns, na, q.as_slice());
        // Keep the incumbent action when it is already greedy, so ties cannot cycle.
        let cur = policies.last().expect("nonempty");
        let mut probs = next.as_slice().to_vec();
        for s in 0..ns {
            let best = q.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if let Some(a) = (0..na).find(|&a| cur.prob(s, a) == 1.0) {
                if q.get(s, a) >= best - 1e-12 {
                    probs[s * na..(s + 1) * na].fill(0.0);
                    probs[s * na + a] = 1.0;
                }
            }
        }
        next = PolicyTable::new(ns, na, probs)?;
        if &next == cur {
            return Ok(PolicyIterationResult {
                policies,
                q_history,
                converged: true,
            });
        }
        q_history.push(standard_q(mdp, &next)?);
        policies.push(next);
    }
    Ok(PolicyIterationResult {
        policies,
        q_history,
        converged: false,
    })
}

/// Entropy-regularized `Q^π`: the bonus at `s'` is `η H(π(·|s'))`.
pub fn soft_q(mdp: &TabularMdp, pi: &PolicyTable, eta: f64) -> Result<QTable> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let ent: Vec<f64> = (0..ns)
        .map(|s| -pi.row(s).iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
        .collect();
    let mut b = mdp.expected_rewards();
    for s in 0..ns {
        for a in 0..na {
            let e: f64 = mdp.transition_row(s, a).iter().zip(&ent).map(|(p, h)| p * h).sum();
            b[s * na + a] += mdp.gamma() * eta * e;
        }
    }
    solve_linear(mdp, pi, &b)
}

/// Soft policy iteration: exact entropy-regularized evaluation, then
/// `π_{k+1} ∝ exp(Q^{π_k} / η)`. Runs exactly `sweeps` improvements unless
/// the Q change drops below `tol` first.
pub fn soft_policy_iteration(mdp: &TabularMdp, pi0: &PolicyTable, eta: f64, sweeps: usize, tol: f64) -> Result<PolicyIterationResult> {
    if eta <= 0.0 {
        return Err(GioError::InvalidConfig("soft policy iteration needs eta > 0".into()));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut policies = vec![pi0.clone()];
    let mut q_history = vec![soft_q(mdp, pi0, eta)?];
    for _ in 0..sweeps {
        let q = q_history.last().expect("nonempty");
        let mut probs = vec![0.0; ns * na];
        for s in 0..ns {
            let m = q.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = q.row(s).iter().map(|x| ((x - m) / eta).exp()).collect();
            let z: f64 = w.iter().sum();
            for a in 0..na {
                probs[s * na + a] = w[a] / z;
            }
        }
        let next = PolicyTable::new(ns, na, probs)?;
        let q_next = soft_q(mdp, &next, eta)?;
        let change = q_next.sup_dist(q);
        policies.push(next);
        q_history.push(q_next);
        if change < tol {
            return Ok(PolicyIterationResult {
                policies,
                q_history,
                converged: true,
            });
        }
    }
    Ok(PolicyIterationResult {
        policies,
        q_history,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs;

    #[test]
    fn deterministic_gridworld_closed_form() {
        let m = envs::gridworld(5, 0.0).unwrap();
        let vi = value_iteration(&m, 1e-12, 100_000).unwrap();
        // Eight moves to the goal, one more step to collect, then restart.
        let g: f64 = 0.95;
        let expect = g.powi(8) / (1.0 - g.powi(9));
        assert!((vi.v[0] - expect).abs() < 1e-10, "{} vs {expect}", vi.v[0]);
    }

    #[test]
    fn policy_iteration_agrees_with_value_iteration() {
        let m = envs::gridworld(5, 0.1).unwrap();
        let vi = value_iteration(&m, 1e-12, 100_000).unwrap();
        let pi = standard_policy_iteration(&m, &PolicyTable::uniform(25, 4), 100).unwrap();
        assert!(pi.converged);
        assert!(pi.q().sup_dist(&vi.q) < 1e-9);
    }

    #[test]
    fn linear_solve_is_a_fixed_point() {
        let m = envs::random(4, 3, 2, 11).unwrap();
        let pi = PolicyTable::uniform(4, 3);
        let q = standard_q(&m, &pi).unwrap();
        assert!(expectation_backup(&m, &q, &pi).sup_dist(&q) < 1e-12);
    }
}
