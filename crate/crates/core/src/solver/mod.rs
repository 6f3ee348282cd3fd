//! Intrinsic policy iteration: the augmented Bellman operator, fixed-point
//! evaluation, softmax improvement, KL projection, and the outer loop with
//! its convergence certificates.

mod improve;
mod iteration;
mod operator;

pub use improve::{
    expected_log_posterior, one_step_objective, project_policy, softmax_from_parts, softmax_improve,
    Improvement, PolicyClass, Projection,
};
pub use iteration::{
    assumption3_terms, policy_iteration, verify_monotonicity, IterationTrace, MonotonicityReport, SolveResult,
    SweepRecord,
};
pub use operator::{
    apply_bellman, evaluate_frozen, evaluate_operator, evaluate_policy, objective_value, Evaluation,
    IntrinsicBellman,
};

use serde::{Deserialize, Serialize};

use crate::error::{GioError, Result};
use crate::future::FutureKind;

/// Deliberate defects used to show that the verification suite notices them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    /// Flips the sign of `η` on the posterior term of the improvement step.
    NegateEta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Temperature in nats. Zero is accepted for evaluation only.
    pub eta: f64,
    pub eval_tol: f64,
    pub eval_max_iters: usize,
    pub outer_max_sweeps: usize,
    /// Stop once both the Q change and the fixed-point KL fall below this.
    pub outer_tol: f64,
    pub future: FutureKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mutation: Option<Mutation>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            eval_tol: 1e-10,
            eval_max_iters: 100_000,
            outer_max_sweeps: 5_000,
            outer_tol: 1e-9,
            future: FutureKind::OneStep,
            mutation: None,
        }
    }
}

impl SolverConfig {
    pub fn with_eta(eta: f64) -> Self {
        Self {
            eta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(GioError::InvalidConfig(format!("eta = {} must be finite and >= 0", self.eta)));
        }
        for (name, v) in [("eval_tol", self.eval_tol), ("outer_tol", self.outer_tol)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(GioError::InvalidConfig(format!("{name} = {v} must be positive")));
            }
        }
        if self.eval_max_iters == 0 {
            return Err(GioError::InvalidConfig("eval_max_iters must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn require_positive_eta(&self) -> Result<()> {
        self.validate()?;
        if self.eta <= 0.0 {
            return Err(GioError::InvalidConfig(
                "softmax improvement needs eta > 0".into(),
            ));
        }
        Ok(())
    }
}
