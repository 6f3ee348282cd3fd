//! Future outcomes `ℱ` observed after acting, and their exact distributions.
//!
//! Three kinds are supported: the one-step transition `(s', r)`, the next
//! state alone, and a `k`-step path of `(s, r)` pairs. For `k`-step paths
//! the intermediate actions are marginalized under a supplied policy, so the
//! likelihood `p(ℱ | s, a)` depends on that policy and must be rebuilt
//! whenever it changes.

use serde::{Deserialize, Serialize};

use crate::error::{GioError, Result};
use crate::mdp::TabularMdp;
use crate::tables::PolicyTable;

/// Longest supported path.
pub const MAX_K: usize = 3;

/// Cap on the unpruned outcome universe.
const MAX_UNIVERSE: usize = 1 << 22;

/// Written `one-step`, `next-state` or `k-step:K` in text and JSON alike.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FutureKind {
    OneStep,
    NextStateOnly,
    KStep(usize),
}

impl FutureKind {
    pub fn needs_policy(self) -> bool {
        matches!(self, FutureKind::KStep(_))
    }
}

impl std::fmt::Display for FutureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FutureKind::OneStep => write!(f, "one-step"),
            FutureKind::NextStateOnly => write!(f, "next-state"),
            FutureKind::KStep(k) => write!(f, "k-step:{k}"),
        }
    }
}

impl std::str::FromStr for FutureKind {
    type Err = GioError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-step" => Ok(FutureKind::OneStep),
            "next-state" => Ok(FutureKind::NextStateOnly),
            other => {
                let k = other
                    .strip_prefix("k-step:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| GioError::UnsupportedFuture(format!("cannot parse `{other}`")))?;
                Ok(FutureKind::KStep(k))
            }
        }
    }
}

impl From<FutureKind> for String {
    fn from(k: FutureKind) -> String {
        k.to_string()
    }
}

impl TryFrom<String> for FutureKind {
    type Error = GioError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// One element of the outcome support.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FutureOutcome {
    Transition { next_state: usize, atom: usize },
    NextState(usize),
    Path(Vec<(usize, usize)>),
}

/// The enumerable support of `ℱ` for one MDP.
#[derive(Clone, Debug)]
pub struct FutureSpace {
    kind: FutureKind,
    n_states: usize,
    n_atoms: usize,
    /// Dense code of each support element, ascending.
    codes: Vec<u64>,
    /// Code → support index, `u32::MAX` when pruned.
    lookup: Vec<u32>,
}

impl FutureSpace {
    /// Enumerates the outcomes reachable under at least one action. For
    /// `k`-step paths reachability is taken under the uniform policy, which
    /// coincides with that of any strictly positive policy.
    pub fn new(mdp: &TabularMdp, kind: FutureKind) -> Result<Self> {
        let n_states = mdp.n_states();
        let n_atoms = mdp.n_atoms();
        let universe = universe_size(kind, n_states, n_atoms)?;
        let mut space = Self {
            kind,
            n_states,
            n_atoms,
            codes: Vec::new(),
            lookup: vec![u32::MAX; universe],
        };
        let uniform = PolicyTable::uniform(n_states, mdp.n_actions());
        let mut seen = vec![false; universe];
        for s in 0..n_states {
            for a in 0..mdp.n_actions() {
                for (code, _) in raw_distribution(mdp, s, a, kind, Some(&uniform)) {
                    seen[code as usize] = true;
                }
            }
        }
        for (code, hit) in seen.into_iter().enumerate() {
            if hit {
                space.lookup[code] = space.codes.len() as u32;
                space.codes.push(code as u64);
            }
        }
        Ok(space)
    }

    pub fn kind(&self) -> FutureKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Size of the outcome universe before pruning.
    pub fn unpruned_len(&self) -> usize {
        self.lookup.len()
    }

    pub fn outcome(&self, idx: usize) -> FutureOutcome {
        decode(self.kind, self.n_states, self.n_atoms, self.codes[idx])
    }

    pub fn index_of(&self, outcome: &FutureOutcome) -> Option<usize> {
        let code = encode(self.kind, self.n_states, self.n_atoms, outcome)?;
        self.lookup
            .get(code as usize)
            .filter(|&&i| i != u32::MAX)
            .map(|&i| i as usize)
    }

    fn index_of_code(&self, code: u64) -> Option<usize> {
        let i = self.lookup[code as usize];
        (i != u32::MAX).then_some(i as usize)
    }

    fn check_mdp(&self, mdp: &TabularMdp) -> Result<()> {
        if mdp.n_states() != self.n_states || mdp.n_atoms() != self.n_atoms {
            return Err(GioError::DimensionMismatch(format!(
                "future space built for {} states / {} atoms, MDP has {} / {}",
                self.n_states,
                self.n_atoms,
                mdp.n_states(),
                mdp.n_atoms()
            )));
        }
        Ok(())
    }
}

fn universe_size(kind: FutureKind, n_states: usize, n_atoms: usize) -> Result<usize> {
    let size = match kind {
        FutureKind::OneStep => n_states * n_atoms,
        FutureKind::NextStateOnly => n_states,
        FutureKind::KStep(k) => {
            if k > MAX_K {
                return Err(GioError::UnsupportedFuture(format!(
                    "k-step future with k = {k} exceeds the limit {MAX_K}"
                )));
            }
            if k < 2 {
                return Err(GioError::UnsupportedFuture(format!(
                    "k-step future needs k in 2..={MAX_K}, got {k}; use one-step instead"
                )));
            }
            (n_states * n_atoms)
                .checked_pow(k as u32)
                .ok_or_else(|| GioError::UnsupportedFuture("outcome universe overflows".into()))?
        }
    };
    if size > MAX_UNIVERSE {
        return Err(GioError::UnsupportedFuture(format!(
            "outcome universe of size {size} exceeds {MAX_UNIVERSE}"
        )));
    }
    Ok(size)
}

fn decode(kind: FutureKind, n_states: usize, n_atoms: usize, code: u64) -> FutureOutcome {
    let code = code as usize;
    match kind {
        FutureKind::OneStep => FutureOutcome::Transition {
            next_state: code / n_atoms,
            atom: code % n_atoms,
        },
        FutureKind::NextStateOnly => FutureOutcome::NextState(code),
        FutureKind::KStep(k) => {
            let base = n_states * n_atoms;
            let mut rest = code;
            let mut steps = vec![(0, 0); k];
            for slot in steps.iter_mut().rev() {
                let t = rest % base;
                rest /= base;
                *slot = (t / n_atoms, t % n_atoms);
            }
            FutureOutcome::Path(steps)
        }
    }
}

fn encode(kind: FutureKind, n_states: usize, n_atoms: usize, outcome: &FutureOutcome) -> Option<u64> {
    let cell = |s: usize, r: usize| (s < n_states && r < n_atoms).then_some((s * n_atoms + r) as u64);
    match (kind, outcome) {
        (FutureKind::OneStep, FutureOutcome::Transition { next_state, atom }) => cell(*next_state, *atom),
        (FutureKind::NextStateOnly, FutureOutcome::NextState(s)) => (*s < n_states).then_some(*s as u64),
        (FutureKind::KStep(k), FutureOutcome::Path(steps)) if steps.len() == k => {
            let base = (n_states * n_atoms) as u64;
            steps
                .iter()
                .try_fold(0u64, |code, &(s, r)| Some(code * base + cell(s, r)?))
        }
        _ => None,
    }
}

/// `(code, probability)` pairs with nonzero probability, before support lookup.
fn raw_distribution(
    mdp: &TabularMdp,
    s: usize,
    a: usize,
    kind: FutureKind,
    policy: Option<&PolicyTable>,
) -> Vec<(u64, f64)> {
    let nk = mdp.n_atoms();
    let p = mdp.transition_row(s, a);
    let r = mdp.reward_row(s, a);
    match kind {
        FutureKind::OneStep => {
            let mut out = Vec::new();
            for (sn, &ps) in p.iter().enumerate() {
                if ps == 0.0 {
                    continue;
                }
                for (k, &pr) in r.iter().enumerate() {
                    if pr > 0.0 {
                        out.push(((sn * nk + k) as u64, ps * pr));
                    }
                }
            }
            out
        }
        FutureKind::NextStateOnly => p
            .iter()
            .enumerate()
            .filter(|(_, &ps)| ps > 0.0)
            .map(|(sn, &ps)| (sn as u64, ps))
            .collect(),
        FutureKind::KStep(k) => {
            let policy = policy.expect("k-step futures need a policy");
            let base = (mdp.n_states() * nk) as u64;
            let marginal = policy_marginal_step(mdp, policy);
            // (code, last state, probability)
            let mut frontier: Vec<(u64, usize, f64)> = Vec::new();
            for (sn, &ps) in p.iter().enumerate() {
                if ps == 0.0 {
                    continue;
                }
                for (kk, &pr) in r.iter().enumerate() {
                    if pr > 0.0 {
                        frontier.push(((sn * nk + kk) as u64, sn, ps * pr));
                    }
                }
            }
            for _ in 1..k {
                let mut next = Vec::with_capacity(frontier.len() * 4);
                for &(code, last, prob) in &frontier {
                    let row = &marginal[last * base as usize..(last + 1) * base as usize];
                    for (t, &pt) in row.iter().enumerate() {
                        if pt > 0.0 {
                            next.push((code * base + t as u64, t / nk, prob * pt));
                        }
                    }
                }
                frontier = next;
            }
            frontier.into_iter().map(|(c, _, p)| (c, p)).collect()
        }
    }
}

/// `M[s][(s', r)] = Σ_a π(a|s) P(s'|s,a) R(r|s,a)`.
fn policy_marginal_step(mdp: &TabularMdp, policy: &PolicyTable) -> Vec<f64> {
    let (ns, na, nk) = (mdp.n_states(), mdp.n_actions(), mdp.n_atoms());
    let mut m = vec![0.0; ns * ns * nk];
    for s in 0..ns {
        for a in 0..na {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            let p = mdp.transition_row(s, a);
            let r = mdp.reward_row(s, a);
            for (sn, &ps) in p.iter().enumerate() {
                for (k, &pr) in r.iter().enumerate() {
                    m[s * ns * nk + sn * nk + k] += pa * ps * pr;
                }
            }
        }
    }
    m
}

/// The distribution of `ℱ` after taking `a` in `s`.
///
/// `policy` is required for `k`-step futures and ignored otherwise.
pub fn enumerate_future(
    mdp: &TabularMdp,
    s: usize,
    a: usize,
    space: &FutureSpace,
    policy: Option<&PolicyTable>,
) -> Result<Vec<(FutureOutcome, f64)>> {
    mdp.check_state(s)?;
    mdp.check_action(a)?;
    space.check_mdp(mdp)?;
    if space.kind.needs_policy() && policy.is_none() {
        return Err(GioError::UnsupportedFuture(
            "k-step futures marginalize intermediate actions and need a policy".into(),
        ));
    }
    Ok(raw_distribution(mdp, s, a, space.kind, policy)
        .into_iter()
        .map(|(code, p)| (decode(space.kind, space.n_states, space.n_atoms, code), p))
        .collect())
}

/// Sparse likelihood `p(ℱ | s, a)` for every state-action pair, indexed
/// into a [`FutureSpace`].
#[derive(Clone, Debug)]
pub struct FutureKernel {
    n_states: usize,
    n_actions: usize,
    n_outcomes: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl FutureKernel {
    pub fn build(mdp: &TabularMdp, space: &FutureSpace, policy: &PolicyTable) -> Result<Self> {
        space.check_mdp(mdp)?;
        if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
            return Err(GioError::DimensionMismatch("policy shape differs from MDP".into()));
        }
        let mut rows = Vec::with_capacity(mdp.n_states() * mdp.n_actions());
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                let mut row = Vec::new();
                for (code, p) in raw_distribution(mdp, s, a, space.kind, Some(policy)) {
                    let idx = space.index_of_code(code).ok_or_else(|| {
                        GioError::UnsupportedFuture(format!(
                            "outcome code {code} has probability {p:e} but lies outside the support"
                        ))
                    })?;
                    row.push((idx, p));
                }
                row.sort_by_key(|&(i, _)| i);
                rows.push(row);
            }
        }
        Ok(Self {
            n_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
            n_outcomes: space.len(),
            rows,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_outcomes(&self) -> usize {
        self.n_outcomes
    }

    /// Nonzero `(outcome index, p(ℱ | s, a))` pairs, ascending in index.
    pub fn row(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.rows[s * self.n_actions + a]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::tests::two_by_two;
    use crate::rng::SeededRng;

    fn random_mdp(ns: usize, na: usize, nk: usize, seed: u64) -> TabularMdp {
        let mut rng = SeededRng::new(seed);
        let mut t = Vec::new();
        let mut r = Vec::new();
        for _ in 0..ns * na {
            t.extend(rng.dirichlet1(ns));
            r.extend(rng.dirichlet1(nk));
        }
        let atoms = (0..nk).map(|k| k as f64).collect();
        TabularMdp::new(ns, na, 0.9, atoms, t, r, rng.dirichlet1(ns)).unwrap()
    }

    #[test]
    fn deterministic_one_step_is_a_point_mass() {
        let m = two_by_two();
        let space = FutureSpace::new(&m, FutureKind::OneStep).unwrap();
        let d = enumerate_future(&m, 0, 0, &space, None).unwrap();
        assert_eq!(d, vec![(FutureOutcome::Transition { next_state: 0, atom: 0 }, 1.0)]);
    }

    #[test]
    fn one_step_is_product_of_marginals() {
        let m = two_by_two();
        let space = FutureSpace::new(&m, FutureKind::OneStep).unwrap();
        // P[1][1] = (0.25, 0.75), R[1][1] = (0.2, 0.8)
        let d = enumerate_future(&m, 1, 1, &space, None).unwrap();
        assert_eq!(d.len(), 4);
        for (o, p) in d {
            let FutureOutcome::Transition { next_state, atom } = o else { panic!() };
            let expect = m.transition_row(1, 1)[next_state] * m.reward_row(1, 1)[atom];
            assert_eq!(p, expect);
        }
    }

    #[test]
    fn k_step_rejects_long_paths() {
        let m = two_by_two();
        assert!(matches!(
            FutureSpace::new(&m, FutureKind::KStep(4)),
            Err(GioError::UnsupportedFuture(_))
        ));
        assert!(FutureSpace::new(&m, FutureKind::KStep(1)).is_err());
    }

    #[test]
    fn k_step_requires_policy() {
        let m = two_by_two();
        let space = FutureSpace::new(&m, FutureKind::KStep(2)).unwrap();
        assert!(enumerate_future(&m, 0, 0, &space, None).is_err());
    }

    #[test]
    fn k_step_universe_size() {
        let m = random_mdp(3, 2, 2, 1);
        let space = FutureSpace::new(&m, FutureKind::KStep(2)).unwrap();
        assert_eq!(space.unpruned_len(), 36);
        // Dirichlet rows are dense, so nothing is pruned.
        assert_eq!(space.len(), 36);
    }

    #[test]
    fn two_step_matches_path_enumeration() {
        // Two-state single-atom chain, brute-force sum over intermediate actions.
        let m = random_mdp(2, 2, 1, 7);
        let mut rng = SeededRng::new(8);
        let pi = PolicyTable::random_positive(2, 2, 0.1, &mut rng);
        let space = FutureSpace::new(&m, FutureKind::KStep(2)).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                let d = enumerate_future(&m, s, a, &space, Some(&pi)).unwrap();
                let total: f64 = d.iter().map(|(_, p)| p).sum();
                assert!((total - 1.0).abs() < 1e-12);
                for s1 in 0..2 {
                    for s2 in 0..2 {
                        let mut brute = 0.0;
                        for a1 in 0..2 {
                            brute += m.transition_row(s, a)[s1] * pi.prob(s1, a1) * m.transition_row(s1, a1)[s2];
                        }
                        let got = d
                            .iter()
                            .find(|(o, _)| *o == FutureOutcome::Path(vec![(s1, 0), (s2, 0)]))
                            .map_or(0.0, |(_, p)| *p);
                        assert!((got - brute).abs() < 1e-15, "{got} vs {brute}");
                    }
                }
            }
        }
    }

    #[test]
    fn outcome_index_round_trip() {
        let m = random_mdp(3, 2, 2, 3);
        for kind in [FutureKind::OneStep, FutureKind::NextStateOnly, FutureKind::KStep(2), FutureKind::KStep(3)] {
            let space = FutureSpace::new(&m, kind).unwrap();
            for i in 0..space.len() {
                assert_eq!(space.index_of(&space.outcome(i)), Some(i), "{kind}");
            }
        }
    }

    #[test]
    fn kernel_rows_normalize_for_all_kinds() {
        let m = random_mdp(4, 3, 2, 5);
        let pi = PolicyTable::uniform(4, 3);
        for kind in [FutureKind::OneStep, FutureKind::NextStateOnly, FutureKind::KStep(2), FutureKind::KStep(3)] {
            let space = FutureSpace::new(&m, kind).unwrap();
            let kern = FutureKernel::build(&m, &space, &pi).unwrap();
            for s in 0..4 {
                for a in 0..3 {
                    let total: f64 = kern.row(s, a).iter().map(|(_, p)| p).sum();
                    assert!((total - 1.0).abs() < 1e-12, "{kind}: {total}");
                }
            }
        }
    }

    #[test]
    fn future_kind_parses() {
        assert_eq!("one-step".parse::<FutureKind>().unwrap(), FutureKind::OneStep);
        assert_eq!("next-state".parse::<FutureKind>().unwrap(), FutureKind::NextStateOnly);
        assert_eq!("k-step:2".parse::<FutureKind>().unwrap(), FutureKind::KStep(2));
        assert!("k-step:x".parse::<FutureKind>().is_err());
        assert_eq!(FutureKind::KStep(3).to_string(), "k-step:3");
    }
}
