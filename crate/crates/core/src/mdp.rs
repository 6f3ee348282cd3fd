//! Finite MDPs with discrete reward atoms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GioError, Result};
use crate::numeric::ROW_SUM_TOL;
use crate::rng::SeededRng;

/// A finite discounted MDP.
///
/// Rewards are categorical over a shared list of atoms, so the one-step
/// outcome `(s', r)` of any state-action pair has finite support.
/// Next state and reward atom are drawn independently given `(s, a)`.
/// A deterministic reward function is the one-atom-per-row special case.
///
/// Tables are stored densely in row-major order: `transition[s][a][s']`
/// and `reward_dist[s][a][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    reward_atoms: Vec<f64>,
    transition: Vec<f64>,
    reward_dist: Vec<f64>,
    initial_dist: Vec<f64>,
}

/// JSON layout of an MDP file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub reward_atoms: Vec<f64>,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward_dist: Vec<Vec<Vec<f64>>>,
    pub initial_dist: Vec<f64>,
}

impl TabularMdp {
    /// Builds an MDP from flat row-major tables and rejects it if any
    /// invariant fails.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        reward_atoms: Vec<f64>,
        transition: Vec<f64>,
        reward_dist: Vec<f64>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        let mdp = Self::new_unchecked(
            n_states,
            n_actions,
            gamma,
            reward_atoms,
            transition,
            reward_dist,
            initial_dist,
        );
        let violations = validate(&mdp);
        if violations.is_empty() {
            Ok(mdp)
        } else {
            Err(GioError::InvalidMdp(violations))
        }
    }

    /// Builds without validation. Use [`validate`] to inspect defects.
    pub fn new_unchecked(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        reward_atoms: Vec<f64>,
        transition: Vec<f64>,
        reward_dist: Vec<f64>,
        initial_dist: Vec<f64>,
    ) -> Self {
        Self {
            n_states,
            n_actions,
            gamma,
            reward_atoms,
            transition,
            reward_dist,
            initial_dist,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_atoms(&self) -> usize {
        self.reward_atoms.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Same dynamics with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut m = self.clone();
        m.gamma = gamma;
        let v = validate(&m);
        if v.is_empty() {
            Ok(m)
        } else {
            Err(GioError::InvalidMdp(v))
        }
    }

    pub fn reward_atoms(&self) -> &[f64] {
        &self.reward_atoms
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// `P(· | s, a)`.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.n_states;
        let base = (s * self.n_actions + a) * n;
        &self.transition[base..base + n]
    }

    /// `R(· | s, a)` over reward atoms.
    pub fn reward_row(&self, s: usize, a: usize) -> &[f64] {
        let k = self.n_atoms();
        let base = (s * self.n_actions + a) * k;
        &self.reward_dist[base..base + k]
    }

    /// Atom-expected reward `r̄(s, a)`.
    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        self.reward_row(s, a)
            .iter()
            .zip(&self.reward_atoms)
            .map(|(p, r)| p * r)
            .sum()
    }

    /// Table of `r̄(s, a)` in `[s][a]` order.
    pub fn expected_rewards(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_states * self.n_actions);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                out.push(self.expected_reward(s, a));
            }
        }
        out
    }

    pub fn check_state(&self, s: usize) -> Result<()> {
        if s < self.n_states {
            Ok(())
        } else {
            Err(GioError::StateOutOfRange {
                state: s,
                n_states: self.n_states,
            })
        }
    }

    pub fn check_action(&self, a: usize) -> Result<()> {
        if a < self.n_actions {
            Ok(())
        } else {
            Err(GioError::ActionOutOfRange {
                action: a,
                n_actions: self.n_actions,
            })
        }
    }

    pub fn to_file(&self) -> MdpFile {
        let nest = |flat: &[f64], inner: usize| -> Vec<Vec<Vec<f64>>> {
            (0..self.n_states)
                .map(|s| {
                    (0..self.n_actions)
                        .map(|a| {
                            let base = (s * self.n_actions + a) * inner;
                            flat[base..base + inner].to_vec()
                        })
                        .collect()
                })
                .collect()
        };
        MdpFile {
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.gamma,
            reward_atoms: self.reward_atoms.clone(),
            transition: nest(&self.transition, self.n_states),
            reward_dist: nest(&self.reward_dist, self.n_atoms()),
            initial_dist: self.initial_dist.clone(),
        }
    }

    pub fn from_file(file: MdpFile) -> Result<Self> {
        let mut shape = Vec::new();
        let flatten = |t: &[Vec<Vec<f64>>], inner: usize, name: &str, shape: &mut Vec<String>| {
            if t.len() != file.n_states {
                shape.push(format!("{name}: expected {} state rows, got {}", file.n_states, t.len()));
            }
            let mut flat = Vec::new();
            for (s, row) in t.iter().enumerate() {
                if row.len() != file.n_actions {
                    shape.push(format!(
                        "{name}[{s}]: expected {} action rows, got {}",
                        file.n_actions,
                        row.len()
                    ));
                }
                for (a, dist) in row.iter().enumerate() {
                    if dist.len() != inner {
                        shape.push(format!(
                            "{name}[{s}][{a}]: expected length {inner}, got {}",
                            dist.len()
                        ));
                    }
                    flat.extend_from_slice(dist);
                }
            }
            flat
        };
        let transition = flatten(&file.transition, file.n_states, "transition", &mut shape);
        let reward_dist = flatten(
            &file.reward_dist,
            file.reward_atoms.len(),
            "reward_dist",
            &mut shape,
        );
        if !shape.is_empty() {
            return Err(GioError::InvalidMdp(shape));
        }
        Self::new(
            file.n_states,
            file.n_actions,
            file.gamma,
            file.reward_atoms,
            transition,
            reward_dist,
            file.initial_dist,
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("MDP serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Samples `s0 ~ ρ0`.
    pub fn sample_initial(&self, rng: &mut SeededRng) -> usize {
        rng.categorical(&self.initial_dist)
    }
}

/// Lists every violated invariant. An empty list means the MDP is well formed.
pub fn validate(mdp: &TabularMdp) -> Vec<String> {
    let mut v = Vec::new();
    let (ns, na, nk) = (mdp.n_states, mdp.n_actions, mdp.reward_atoms.len());
    if ns == 0 {
        v.push("n_states must be positive".to_string());
    }
    if na == 0 {
        v.push("n_actions must be positive".to_string());
    }
    if nk == 0 {
        v.push("reward_atoms must be nonempty".to_string());
    }
    if !(0.0..1.0).contains(&mdp.gamma) {
        v.push(format!("gamma = {} not in [0, 1)", mdp.gamma));
    }
    if mdp.reward_atoms.iter().any(|r| !r.is_finite()) {
        v.push("reward_atoms contain a non-finite value".to_string());
    }
    if mdp.transition.len() != ns * na * ns {
        v.push(format!(
            "transition has {} entries, expected {}",
            mdp.transition.len(),
            ns * na * ns
        ));
    }
    if mdp.reward_dist.len() != ns * na * nk {
        v.push(format!(
            "reward_dist has {} entries, expected {}",
            mdp.reward_dist.len(),
            ns * na * nk
        ));
    }
    if mdp.initial_dist.len() != ns {
        v.push(format!(
            "initial_dist has {} entries, expected {ns}",
            mdp.initial_dist.len()
        ));
    }
    if !v.is_empty() {
        return v;
    }
    for s in 0..ns {
        for a in 0..na {
            check_row(&mut v, &format!("P[{s}][{a}]"), mdp.transition_row(s, a));
            check_row(&mut v, &format!("R[{s}][{a}]"), mdp.reward_row(s, a));
        }
    }
    check_row(&mut v, "rho0", &mdp.initial_dist);
    v
}

fn check_row(v: &mut Vec<String>, name: &str, row: &[f64]) {
    if let Some((i, p)) = row
        .iter()
        .enumerate()
        .find(|(_, p)| !(p.is_finite() && **p >= 0.0))
    {
        v.push(format!("{name}[{i}] = {p} is not a nonnegative probability"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        v.push(format!("{name} sums to {sum}, not 1"));
    }
}

/// Samples `(s', atom index)` for one step. The reward value is
/// `mdp.reward_atoms()[atom]`.
pub fn step_atom(mdp: &TabularMdp, s: usize, a: usize, rng: &mut SeededRng) -> Result<(usize, usize)> {
    mdp.check_state(s)?;
    mdp.check_action(a)?;
    let next = rng.categorical(mdp.transition_row(s, a));
    let atom = rng.categorical(mdp.reward_row(s, a));
    Ok((next, atom))
}

/// Samples `(s', r)`.
pub fn step(mdp: &TabularMdp, s: usize, a: usize, rng: &mut SeededRng) -> Result<(usize, f64)> {
    let (next, atom) = step_atom(mdp, s, a, rng)?;
    Ok((next, mdp.reward_atoms[atom]))
}

/// One observed step. The reward is stored as an atom index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub atom: usize,
    pub s_next: usize,
}

/// Runs `pi` for `steps` steps from a draw of the initial distribution.
/// The episode never terminates; goal resets are part of the dynamics.
pub fn rollout(mdp: &TabularMdp, pi: &crate::tables::PolicyTable, steps: usize, rng: &mut SeededRng) -> Result<Vec<Transition>> {
    if pi.n_states() != mdp.n_states || pi.n_actions() != mdp.n_actions {
        return Err(GioError::DimensionMismatch("policy shape does not match the MDP".into()));
    }
    let mut s = mdp.sample_initial(rng);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let a = rng.categorical(pi.row(s));
        let (s_next, atom) = step_atom(mdp, s, a, rng)?;
        out.push(Transition { s, a, atom, s_next });
        s = s_next;
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn two_by_two() -> TabularMdp {
        TabularMdp::new(
            2,
            2,
            0.9,
            vec![0.0, 1.0],
            vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0, 0.25, 0.75],
            vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.2, 0.8],
            vec![1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn well_formed_has_no_violations() {
        assert!(validate(&two_by_two()).is_empty());
    }

    #[test]
    fn short_row_is_reported() {
        let m = two_by_two();
        let mut t = m.transition.clone();
        t[0] = 0.9;
        let bad = TabularMdp::new_unchecked(2, 2, 0.9, m.reward_atoms.clone(), t, m.reward_dist.clone(), m.initial_dist.clone());
        let v = validate(&bad);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].contains("P[0][0]"));
    }

    #[test]
    fn gamma_one_rejected() {
        let m = two_by_two();
        assert!(m.with_gamma(1.0).is_err());
        assert!(m.with_gamma(0.0).is_ok());
    }

    #[test]
    fn step_rejects_bad_indices() {
        let m = two_by_two();
        let mut rng = SeededRng::new(0);
        assert!(matches!(step(&m, 2, 0, &mut rng), Err(GioError::StateOutOfRange { .. })));
        assert!(matches!(step(&m, 0, 5, &mut rng), Err(GioError::ActionOutOfRange { .. })));
    }

    #[test]
    fn deterministic_row_always_hits_successor() {
        let m = two_by_two();
        let mut rng = SeededRng::new(9);
        for _ in 0..200 {
            assert_eq!(step(&m, 0, 0, &mut rng).unwrap(), (0, 0.0));
            assert_eq!(step(&m, 1, 0, &mut rng).unwrap().0, 1);
        }
    }

    #[test]
    fn uniform_successor_frequencies_within_three_sigma() {
        let m = two_by_two();
        let mut rng = SeededRng::new(11);
        let n = 100_000;
        let hits = (0..n).filter(|_| step(&m, 0, 1, &mut rng).unwrap().0 == 0).count();
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((hits as f64 - n as f64 * 0.5).abs() < 3.0 * sigma, "{hits}");
    }

    #[test]
    fn fixed_seed_reproduces_trajectory() {
        let m = two_by_two();
        let run = |seed| {
            let mut rng = SeededRng::new(seed);
            let mut s = 0;
            let mut out = Vec::new();
            for t in 0..50 {
                let (n, r) = step(&m, s, t % 2, &mut rng).unwrap();
                out.push((n, r.to_bits()));
                s = n;
            }
            out
        };
        assert_eq!(run(5), run(5));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = two_by_two();
        let back = TabularMdp::from_json(&m.to_json()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn loader_rejects_invalid_rows() {
        let mut f = two_by_two().to_file();
        f.reward_dist[1][1] = vec![0.3, 0.3];
        assert!(matches!(TabularMdp::from_file(f), Err(GioError::InvalidMdp(_))));
    }

    #[test]
    fn loader_rejects_ragged_tables() {
        let mut f = two_by_two().to_file();
        f.transition[0].pop();
        assert!(TabularMdp::from_file(f).is_err());
        let text = r#"{"n_states":1,"n_actions":1,"gamma":0.5,"reward_atoms":[1],"transition":[[[1]]],"reward_dist":[[[1]]],"initial_dist":[1],"extra":3}"#;
        assert!(TabularMdp::from_json(text).is_err());
    }
}
