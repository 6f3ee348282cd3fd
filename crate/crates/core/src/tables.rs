//! Policies and value tables over `S × A`.

use serde::{Deserialize, Serialize};

use crate::error::{GioError, Result};
use crate::numeric::{softmax_into, POSITIVE_FLOOR, ROW_SUM_TOL};
use crate::rng::SeededRng;

/// A stochastic policy `π(a | s)`, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        let p = Self {
            n_states,
            n_actions,
            probs,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(GioError::InvalidPolicy("ragged rows".into()));
        }
        Self::new(n_states, n_actions, rows.concat())
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Row-wise softmax of a logit table.
    pub fn from_logits(n_states: usize, n_actions: usize, logits: &[f64]) -> Self {
        let mut probs = vec![0.0; n_states * n_actions];
        for s in 0..n_states {
            let r = s * n_actions..(s + 1) * n_actions;
            softmax_into(&logits[r.clone()], &mut probs[r]);
        }
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    /// Rows drawn from Dirichlet(1), mixed with uniform so every entry is
    /// at least `mix / n_actions`.
    pub fn random_positive(n_states: usize, n_actions: usize, mix: f64, rng: &mut SeededRng) -> Self {
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for _ in 0..n_states {
            let row = rng.dirichlet1(n_actions);
            probs.extend(row.iter().map(|p| (1.0 - mix) * p + mix / n_actions as f64));
        }
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.len() != self.n_states * self.n_actions {
            return Err(GioError::InvalidPolicy(format!(
                "expected {} entries, got {}",
                self.n_states * self.n_actions,
                self.probs.len()
            )));
        }
        for s in 0..self.n_states {
            let row = self.row(s);
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(GioError::InvalidPolicy(format!("row {s} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(GioError::InvalidPolicy(format!("row {s} sums to {sum}")));
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Every entry is at least [`POSITIVE_FLOOR`].
    pub fn is_strictly_positive(&self) -> bool {
        self.probs.iter().all(|&p| p >= POSITIVE_FLOOR)
    }

    pub fn require_strictly_positive(&self) -> Result<()> {
        for s in 0..self.n_states {
            let min_prob = self.row(s).iter().copied().fold(f64::INFINITY, f64::min);
            if min_prob < POSITIVE_FLOOR {
                return Err(GioError::PolicyNotPositive { state: s, min_prob });
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_states).map(|s| self.row(s).to_vec()).collect()
    }
}

/// Action values `Q(s, a)`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_vec(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(GioError::DimensionMismatch(format!(
                "Q table needs {} entries, got {}",
                n_states * n_actions,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GioError::DimensionMismatch("Q table has a non-finite entry".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn sup_dist(&self, other: &QTable) -> f64 {
        crate::numeric::sup_norm_diff(&self.values, &other.values)
    }

    /// `min_{s,a} (self − other)`.
    pub fn min_diff(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn same_shape(&self, n_states: usize, n_actions: usize) -> bool {
        self.n_states == n_states && self.n_actions == n_actions
    }
}

/// State values `V(s)`.
pub type VTable = Vec<f64>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unnormalized_rows() {
        assert!(PolicyTable::from_rows(vec![vec![0.5, 0.4]]).is_err());
        assert!(PolicyTable::from_rows(vec![vec![1.5, -0.5]]).is_err());
        assert!(PolicyTable::from_rows(vec![vec![0.5, 0.5], vec![1.0]]).is_err());
    }

    #[test]
    fn positivity_flag() {
        let p = PolicyTable::from_rows(vec![vec![1.0, 0.0]]).unwrap();
        assert!(!p.is_strictly_positive());
        assert!(matches!(
            p.require_strictly_positive(),
            Err(GioError::PolicyNotPositive { state: 0, .. })
        ));
        assert!(PolicyTable::uniform(3, 4).is_strictly_positive());
    }

    #[test]
    fn random_positive_respects_mix_floor() {
        let mut rng = SeededRng::new(2);
        let p = PolicyTable::random_positive(10, 3, 0.3, &mut rng);
        p.validate().unwrap();
        assert!(p.as_slice().iter().all(|&x| x >= 0.1 - 1e-15));
    }

    #[test]
    fn q_table_rejects_nan() {
        assert!(QTable::from_vec(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(QTable::from_vec(1, 2, vec![0.0]).is_err());
    }
}
