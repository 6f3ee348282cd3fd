//! Exact Bayes posteriors over actions, mutual information, and KL identities.

use serde::Serialize;

use crate::error::{GioError, Result};
use crate::future::{FutureKernel, FutureSpace};
use crate::mdp::TabularMdp;
use crate::numeric::{entropy, safe_ln};
use crate::tables::PolicyTable;

/// `p^π(a | s, ℱ)` indexed by `(s, outcome, a)`.
///
/// Rows whose marginal `p^π(ℱ | s)` is zero carry no distribution; they are
/// marked undefined and read back as `None`.
#[derive(Clone, Debug, Serialize)]
pub struct PosteriorTable {
    n_states: usize,
    n_outcomes: usize,
    n_actions: usize,
    probs: Vec<f64>,
    defined: Vec<bool>,
    approximate: bool,
}

impl PosteriorTable {
    /// A table with every row undefined.
    pub fn empty(n_states: usize, n_outcomes: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_outcomes,
            n_actions,
            probs: vec![f64::NAN; n_states * n_outcomes * n_actions],
            defined: vec![false; n_states * n_outcomes],
            approximate: false,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_outcomes(&self) -> usize {
        self.n_outcomes
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// True when the table came from a learned model rather than Bayes' rule.
    pub fn is_approximate(&self) -> bool {
        self.approximate
    }

    pub fn mark_approximate(&mut self) {
        self.approximate = true;
    }

    pub fn is_defined(&self, s: usize, o: usize) -> bool {
        self.defined[s * self.n_outcomes + o]
    }

    pub fn row(&self, s: usize, o: usize) -> Option<&[f64]> {
        let i = s * self.n_outcomes + o;
        self.defined[i].then(|| &self.probs[i * self.n_actions..(i + 1) * self.n_actions])
    }

    /// Overwrites a row and marks it defined.
    pub fn set_row(&mut self, s: usize, o: usize, row: &[f64]) {
        let i = s * self.n_outcomes + o;
        self.probs[i * self.n_actions..(i + 1) * self.n_actions].copy_from_slice(row);
        self.defined[i] = true;
    }

    pub fn prob(&self, s: usize, o: usize, a: usize) -> Option<f64> {
        self.row(s, o).map(|r| r[a])
    }

    /// Largest `|p − q|` over rows defined in both tables.
    pub fn max_abs_diff(&self, other: &PosteriorTable) -> f64 {
        let mut worst = 0.0f64;
        for s in 0..self.n_states {
            for o in 0..self.n_outcomes {
                if let (Some(a), Some(b)) = (self.row(s, o), other.row(s, o)) {
                    for (x, y) in a.iter().zip(b) {
                        worst = worst.max((x - y).abs());
                    }
                }
            }
        }
        worst
    }

    /// Diagnostic dump: one record per defined row, with the outcome decoded.
    pub fn to_json(&self, space: &FutureSpace) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            state: usize,
            outcome: crate::future::FutureOutcome,
            posterior: &'a [f64],
        }
        #[derive(Serialize)]
        struct Dump<'a> {
            kind: String,
            approximate: bool,
            rows: Vec<Row<'a>>,
        }
        let mut rows = Vec::new();
        for s in 0..self.n_states {
            for o in 0..self.n_outcomes {
                if let Some(posterior) = self.row(s, o) {
                    rows.push(Row {
                        state: s,
                        outcome: space.outcome(o),
                        posterior,
                    });
                }
            }
        }
        serde_json::to_string_pretty(&Dump {
            kind: space.kind().to_string(),
            approximate: self.approximate,
            rows,
        })
        .expect("posterior dump serializes")
    }
}

/// `p^π(ℱ | s) = Σ_a p(ℱ | s, a) π(a | s)`.
#[derive(Clone, Debug, Serialize)]
pub struct MarginalTable {
    n_states: usize,
    n_outcomes: usize,
    probs: Vec<f64>,
}

impl MarginalTable {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_outcomes(&self) -> usize {
        self.n_outcomes
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_outcomes..(s + 1) * self.n_outcomes]
    }

    pub fn prob(&self, s: usize, o: usize) -> f64 {
        self.probs[s * self.n_outcomes + o]
    }
}

/// Marginal over outcomes for each state.
pub fn marginal_from_kernel(kernel: &FutureKernel, pi: &PolicyTable) -> MarginalTable {
    let (ns, na, no) = (kernel.n_states(), kernel.n_actions(), kernel.n_outcomes());
    let mut probs = vec![0.0; ns * no];
    for s in 0..ns {
        let m = &mut probs[s * no..(s + 1) * no];
        for a in 0..na {
            let pa = pi.prob(s, a);
            for &(o, p) in kernel.row(s, a) {
                m[o] += p * pa;
            }
        }
    }
    MarginalTable {
        n_states: ns,
        n_outcomes: no,
        probs,
    }
}

/// Bayes inversion against a prebuilt likelihood kernel. Only requires
/// `π > 0` where a posterior is read, which the solver guarantees.
pub fn posterior_from_kernel(kernel: &FutureKernel, pi: &PolicyTable) -> (PosteriorTable, MarginalTable) {
    let marg = marginal_from_kernel(kernel, pi);
    let (ns, na, no) = (kernel.n_states(), kernel.n_actions(), kernel.n_outcomes());
    let mut post = PosteriorTable::empty(ns, no, na);
    for s in 0..ns {
        for a in 0..na {
            let pa = pi.prob(s, a);
            for &(o, p) in kernel.row(s, a) {
                let i = s * no + o;
                if !post.defined[i] {
                    post.defined[i] = marg.probs[i] > 0.0;
                    if post.defined[i] {
                        post.probs[i * na..(i + 1) * na].fill(0.0);
                    }
                }
                if post.defined[i] {
                    post.probs[i * na + a] = p * pa / marg.probs[i];
                }
            }
        }
    }
    (post, marg)
}

/// Exact posterior and marginal for a strictly positive policy.
pub fn exact_posterior(mdp: &TabularMdp, pi: &PolicyTable, space: &FutureSpace) -> Result<(PosteriorTable, MarginalTable)> {
    check_policy(mdp, pi)?;
    let kernel = FutureKernel::build(mdp, space, pi)?;
    Ok(posterior_from_kernel(&kernel, pi))
}

fn check_policy(mdp: &TabularMdp, pi: &PolicyTable) -> Result<()> {
    if pi.n_states() != mdp.n_states() || pi.n_actions() != mdp.n_actions() {
        return Err(GioError::DimensionMismatch(format!(
            "policy is {}x{}, MDP is {}x{}",
            pi.n_states(),
            pi.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    pi.require_strictly_positive()
}

/// `Σ_ℱ p(ℱ | s, a) (log p(a | s, ℱ) − log π(a | s))` for every `(s, a)`,
/// computed as `Σ_ℱ p(ℱ | s, a) (log p(ℱ | s, a) − log p(ℱ | s))` so that it
/// stays finite when `π(a | s)` underflows.
pub fn log_ratio_table(kernel: &FutureKernel, marg: &MarginalTable) -> Vec<f64> {
    let (ns, na) = (kernel.n_states(), kernel.n_actions());
    let mut out = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            out[s * na + a] = kernel
                .row(s, a)
                .iter()
                .map(|&(o, p)| p * (safe_ln(p) - safe_ln(marg.prob(s, o))))
                .sum();
        }
    }
    out
}

/// Log-ratio table against an arbitrary (possibly approximate) posterior:
/// `Σ_ℱ p(ℱ | s, a) (log q(a | s, ℱ) − log π(a | s))`.
pub fn log_ratio_table_with(kernel: &FutureKernel, post: &PosteriorTable, pi: &PolicyTable) -> Vec<f64> {
    let (ns, na) = (kernel.n_states(), kernel.n_actions());
    let mut out = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let lp = safe_ln(pi.prob(s, a));
            out[s * na + a] = kernel
                .row(s, a)
                .iter()
                .map(|&(o, p)| {
                    let q = post.prob(s, o, a).unwrap_or(0.0);
                    p * (safe_ln(q) - lp)
                })
                .sum();
        }
    }
    out
}

/// `I[s]` in the ratio form `E[log p(ℱ, a | s) / (p(ℱ | s) π(a | s))]`.
pub fn mutual_information(mdp: &TabularMdp, pi: &PolicyTable, space: &FutureSpace) -> Result<Vec<f64>> {
    check_policy(mdp, pi)?;
    let kernel = FutureKernel::build(mdp, space, pi)?;
    let marg = marginal_from_kernel(&kernel, pi);
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut out = vec![0.0; ns];
    for (s, slot) in out.iter_mut().enumerate() {
        for a in 0..na {
            let pa = pi.prob(s, a);
            for &(o, p) in kernel.row(s, a) {
                let joint = p * pa;
                *slot += joint * (joint.ln() - (marg.prob(s, o) * pa).ln());
            }
        }
    }
    Ok(out)
}

/// `I[s]` in the entropy form `H(π(·|s)) − E_ℱ[H(p(· | s, ℱ))]`.
pub fn mutual_information_entropy_form(mdp: &TabularMdp, pi: &PolicyTable, space: &FutureSpace) -> Result<Vec<f64>> {
    let (post, marg) = exact_posterior(mdp, pi, space)?;
    Ok((0..mdp.n_states())
        .map(|s| {
            let cond: f64 = (0..post.n_outcomes())
                .filter_map(|o| post.row(s, o).map(|r| marg.prob(s, o) * entropy(r)))
                .sum();
            entropy(pi.row(s)) - cond
        })
        .collect())
}

/// `Σ p log(p / q)`. Returns `+∞` (with a warning) when `p > 0` where `q = 0`.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(GioError::DimensionMismatch(format!(
            "kl over supports of size {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= 0.0 {
            continue;
        }
        if qi <= 0.0 {
            log::warn!("kl: p = {pi:e} where q = 0; divergence is infinite");
            return Ok(f64::INFINITY);
        }
        total += pi * (pi.ln() - qi.ln());
    }
    Ok(total)
}

fn check_joint(joint: &[Vec<f64>]) -> Result<(usize, usize)> {
    let nx = joint.len();
    let ny = joint.first().map_or(0, Vec::len);
    if nx == 0 || ny == 0 || joint.iter().any(|r| r.len() != ny) {
        return Err(GioError::DimensionMismatch("joint table must be a nonempty rectangle".into()));
    }
    Ok((nx, ny))
}

fn marginals(joint: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let px: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let mut py = vec![0.0; joint[0].len()];
    for r in joint {
        for (y, v) in r.iter().enumerate() {
            py[y] += v;
        }
    }
    (px, py)
}

/// `D_KL(p(x,y) ‖ q(y)p(x)) − D_KL(p(x,y) ‖ p(y)p(x))` for a joint indexed
/// `[x][y]`. Equals `kl(p(y), q(y))`.
pub fn lemma1_gap(joint: &[Vec<f64>], q: &[f64]) -> Result<f64> {
    let (_, ny) = check_joint(joint)?;
    if q.len() != ny {
        return Err(GioError::DimensionMismatch(format!("q has {} entries, y has {ny}", q.len())));
    }
    let (px, py) = marginals(joint);
    let mut with_q = 0.0;
    let mut with_p = 0.0;
    for (x, row) in joint.iter().enumerate() {
        for (y, &pxy) in row.iter().enumerate() {
            if pxy > 0.0 {
                with_q += pxy * (pxy.ln() - (q[y] * px[x]).ln());
                with_p += pxy * (pxy.ln() - (py[y] * px[x]).ln());
            }
        }
    }
    Ok(with_q - with_p)
}

/// `E_{p(x,y)}[log p(x|y)/p(x)] − E_{p(x,y)}[log q(x|y)/p(x)]` for a joint
/// indexed `[x][y]` and a conditional indexed `[y][x]`. Equals
/// `E_{p(y)}[kl(p(x|y), q(x|y))]`.
pub fn corollary1_gap(joint: &[Vec<f64>], q_x_given_y: &[Vec<f64>]) -> Result<f64> {
    let (nx, ny) = check_joint(joint)?;
    if q_x_given_y.len() != ny || q_x_given_y.iter().any(|r| r.len() != nx) {
        return Err(GioError::DimensionMismatch(format!("conditional must be {ny}x{nx}")));
    }
    let (px, py) = marginals(joint);
    let mut true_term = 0.0;
    let mut q_term = 0.0;
    for (x, row) in joint.iter().enumerate() {
        for (y, &pxy) in row.iter().enumerate() {
            if pxy > 0.0 {
                let p_cond = pxy / py[y];
                true_term += pxy * (p_cond.ln() - px[x].ln());
                q_term += pxy * (safe_ln(q_x_given_y[y][x]) - px[x].ln());
            }
        }
    }
    Ok(true_term - q_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::future::FutureKind;
    use crate::mdp::tests::two_by_two;

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), f64::INFINITY);
        assert!(kl(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn posterior_rows_normalize() {
        let m = two_by_two();
        let pi = PolicyTable::from_rows(vec![vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap();
        let space = FutureSpace::new(&m, FutureKind::OneStep).unwrap();
        let (post, marg) = exact_posterior(&m, &pi, &space).unwrap();
        for s in 0..2 {
            let total: f64 = marg.row(s).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            for o in 0..space.len() {
                match post.row(s, o) {
                    Some(r) => assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12),
                    None => assert_eq!(marg.prob(s, o), 0.0),
                }
            }
        }
    }

    #[test]
    fn zero_policy_entry_rejected() {
        let m = two_by_two();
        let pi = PolicyTable::from_rows(vec![vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let space = FutureSpace::new(&m, FutureKind::OneStep).unwrap();
        assert!(matches!(
            exact_posterior(&m, &pi, &space),
            Err(GioError::PolicyNotPositive { state: 0, .. })
        ));
    }

    #[test]
    fn mi_forms_agree() {
        let m = two_by_two();
        let pi = PolicyTable::from_rows(vec![vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap();
        for kind in [FutureKind::OneStep, FutureKind::NextStateOnly] {
            let space = FutureSpace::new(&m, kind).unwrap();
            let a = mutual_information(&m, &pi, &space).unwrap();
            let b = mutual_information_entropy_form(&m, &pi, &space).unwrap();
            for s in 0..2 {
                assert!((a[s] - b[s]).abs() < 1e-12);
                assert!(a[s] >= -1e-12);
                assert!(a[s] <= entropy(pi.row(s)) + 1e-12);
            }
        }
    }

    #[test]
    fn marginal_gap_equals_kl_example() {
        let joint = vec![vec![0.1, 0.2], vec![0.3, 0.4]];
        let q = [0.25, 0.75];
        let gap = lemma1_gap(&joint, &q).unwrap();
        let expect = kl(&[0.4, 0.6], &q).unwrap();
        assert!((gap - expect).abs() < 1e-14);
        assert!(lemma1_gap(&joint, &[1.0]).is_err());
    }

    #[test]
    fn conditional_gap_against_marginal_is_mi() {
        let joint = vec![vec![0.1, 0.2], vec![0.3, 0.4]];
        // q(x|y) = p(x) ignores y
        let q = vec![vec![0.3, 0.7], vec![0.3, 0.7]];
        let gap = corollary1_gap(&joint, &q).unwrap();
        let mut mi = 0.0;
        let px = [0.3, 0.7];
        let py = [0.4, 0.6];
        for x in 0..2 {
            for y in 0..2 {
                mi += joint[x][y] * (joint[x][y] / (px[x] * py[y])).ln();
            }
        }
        assert!((gap - mi).abs() < 1e-14);
    }
}
