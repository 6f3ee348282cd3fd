//! Tabular off-policy agent with intrinsic targets.
//!
//! Twin critics are trained toward `y = r + γ(E_{a'∼π}[min_i Q̄_i(s',a')] + ηΔ(s'))`,
//! where `Δ` is the log-ratio between the learned posterior and the policy at
//! the next state, evaluated on outcomes drawn from the learned model. The
//! actor takes exact KL steps toward `𝒢(min_i Q_i, q_φ)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{GioError, Result};
use crate::mdp::{step_atom, TabularMdp, Transition};
use crate::numeric::{argmax, log_softmax, mean_std, softmax};
use crate::rng::SeededRng;
use crate::tables::{PolicyTable, QTable};
use crate::variational::{training_grad, Optimizer, VariationalModel};

/// Outcomes whose model probability falls below this are skipped in exact
/// expectations. Their contribution is bounded by `1e-15 · |log q|`.
const SKIP_PROB: f64 = 1e-15;

/// Fixed-capacity ring of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(GioError::InvalidConfig("buffer capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            data: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Slot the next push writes to.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn as_slice(&self) -> &[Transition] {
        &self.data
    }

    /// Uniform index over current contents.
    pub fn sample_index(&self, rng: &mut SeededRng) -> usize {
        rng.below(self.data.len())
    }

    /// `n` draws with replacement.
    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Result<Vec<Transition>> {
        if self.data.is_empty() {
            return Err(GioError::Empty("replay buffer"));
        }
        Ok((0..n).map(|_| self.data[self.sample_index(rng)]).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentParams {
    pub eta: f64,
    /// Overrides the environment's discount when set.
    pub gamma: Option<f64>,
    pub tau: f64,
    pub lr_critic: f64,
    pub lr_actor: f64,
    pub lr_model: f64,
    pub batch_size: usize,
    pub model_batch_size: usize,
    pub buffer_capacity: usize,
    /// Updates start once the buffer holds this many transitions.
    pub warmup: usize,
    pub critic_every: usize,
    pub actor_every: usize,
    /// `None` disables planning.
    pub plan_every: Option<usize>,
    pub plan_batch: usize,
    pub target_every: usize,
    /// Samples per Δ evaluation.
    pub model_samples: usize,
    pub exact_delta: bool,
    /// Keep `q_φ` at its current value; `p_ψ` still trains.
    pub freeze_inference: bool,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_horizon: usize,
}

impl Default for AgentParams {
    fn default() -> Self {
        Self {
            eta: 0.05,
            gamma: None,
            tau: 0.01,
            lr_critic: 0.5,
            lr_actor: 1.0,
            lr_model: 5.0,
            batch_size: 32,
            model_batch_size: 32,
            buffer_capacity: 100_000,
            warmup: 500,
            critic_every: 1,
            actor_every: 1,
            plan_every: Some(10),
            plan_batch: 32,
            target_every: 1,
            model_samples: 1,
            exact_delta: false,
            freeze_inference: false,
            eval_every: 10_000,
            eval_episodes: 20,
            eval_horizon: 100,
        }
    }
}

impl AgentParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GioError::InvalidConfig(m.into()));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad("eta must be finite and >= 0");
        }
        if let Some(g) = self.gamma {
            if !(0.0..1.0).contains(&g) {
                return bad("gamma must lie in [0, 1)");
            }
        }
        for (name, v) in [("lr_critic", self.lr_critic), ("lr_actor", self.lr_actor), ("lr_model", self.lr_model)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(GioError::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        let counts = [
            self.batch_size,
            self.model_batch_size,
            self.buffer_capacity,
            self.critic_every,
            self.actor_every,
            self.plan_batch,
            self.target_every,
            self.model_samples,
            self.eval_every,
            self.eval_episodes,
            self.eval_horizon,
        ];
        if counts.contains(&0) || self.plan_every == Some(0) {
            return bad("sizes and cadences must be positive");
        }
        Ok(())
    }
}

/// Target critic tables. Bootstrapped targets are computed from this type
/// alone, so they cannot read the live critics.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetCritics {
    pub q1: QTable,
    pub q2: QTable,
}

impl TargetCritics {
    pub fn min_value(&self, s: usize, a: usize) -> f64 {
        self.q1.get(s, a).min(self.q2.get(s, a))
    }

    /// `E_{a'∼π(·|s')}[min_i Q̄_i(s', a')]`.
    pub fn expected_min(&self, pi_row: &[f64], s_next: usize) -> f64 {
        pi_row.iter().enumerate().map(|(a, p)| p * self.min_value(s_next, a)).sum()
    }
}

/// `y = r + γ (E_{a'}[min_i Q̄_i(s',a')] + η Δ)`.
pub fn td_target(targets: &TargetCritics, pi_next: &[f64], reward: f64, s_next: usize, delta: f64, gamma: f64, eta: f64) -> f64 {
    let bonus = if eta == 0.0 { 0.0 } else { eta * delta };
    reward + gamma * (targets.expected_min(pi_next, s_next) + bonus)
}

/// `E_{F∼p_ψ(·|s,a)}[log q_φ(a | s, F)]` for every action at `s`.
pub fn expected_log_q(model: &VariationalModel, s: usize) -> Vec<f64> {
    let (na, ns, nk) = (model.n_actions(), model.n_states(), model.n_atoms());
    let pn: Vec<Vec<f64>> = (0..na).map(|a| model.p_next_row(s, a)).collect();
    let pr: Vec<Vec<f64>> = (0..na).map(|a| model.p_reward_row(s, a)).collect();
    let mut out = vec![0.0; na];
    for sn in 0..ns {
        for k in 0..nk {
            let w: Vec<f64> = (0..na).map(|a| pn[a][sn] * pr[a][k]).collect();
            if w.iter().all(|&x| x < SKIP_PROB) {
                continue;
            }
            let lq = model.log_q_row(s, sn, k);
            for a in 0..na {
                if w[a] >= SKIP_PROB {
                    out[a] += w[a] * lq[a];
                }
            }
        }
    }
    out
}

/// Exact `Δ(s') = Σ_{a'} π(a'|s') (E_{F'∼p_ψ}[log q_φ(a'|s',F')] − log π(a'|s'))`.
pub fn delta_exact(model: &VariationalModel, pi: &PolicyTable, s_next: usize) -> f64 {
    let elq = expected_log_q(model, s_next);
    pi.row(s_next)
        .iter()
        .zip(&elq)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, e)| p * (e - p.ln()))
        .sum()
}

/// Monte Carlo `Δ(s')` from `m` draws of `a' ∼ π`, `(s'', k') ∼ p_ψ`.
pub fn delta_sampled(model: &VariationalModel, pi: &PolicyTable, s_next: usize, m: usize, rng: &mut SeededRng) -> f64 {
    let row = pi.row(s_next);
    let mut total = 0.0;
    for _ in 0..m {
        let a = rng.categorical(row);
        let (s2, k) = model.sample_outcome(s_next, a, rng);
        total += model.log_q_row(s_next, s2, k)[a] - row[a].max(crate::numeric::PROB_FLOOR).ln();
    }
    total / m as f64
}

/// Per-step diagnostics from one round of updates.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepStats {
    pub elbo: Option<f64>,
    pub delta_mean: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_kl: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Agent {
    params: AgentParams,
    gamma: f64,
    reward_atoms: Vec<f64>,
    theta: Vec<f64>,
    pi: PolicyTable,
    critics: [QTable; 2],
    targets: TargetCritics,
    buffer: ReplayBuffer,
}

impl Agent {
    /// Uniform policy, zero critics and targets.
    pub fn new(env: &TabularMdp, params: AgentParams) -> Result<Self> {
        params.validate()?;
        let (ns, na) = (env.n_states(), env.n_actions());
        let gamma = params.gamma.unwrap_or(env.gamma());
        let buffer = ReplayBuffer::new(params.buffer_capacity)?;
        Ok(Self {
            params,
            gamma,
            reward_atoms: env.reward_atoms().to_vec(),
            theta: vec![0.0; ns * na],
            pi: PolicyTable::uniform(ns, na),
            critics: [QTable::zeros(ns, na), QTable::zeros(ns, na)],
            targets: TargetCritics {
                q1: QTable::zeros(ns, na),
                q2: QTable::zeros(ns, na),
            },
            buffer,
        })
    }

    pub fn params(&self) -> &AgentParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut AgentParams {
        &mut self.params
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn n_states(&self) -> usize {
        self.pi.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.pi.n_actions()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.theta.len() || theta.iter().any(|x| !x.is_finite()) {
            return Err(GioError::DimensionMismatch("theta has the wrong length or non-finite entries".into()));
        }
        self.theta = theta;
        self.refresh_policy();
        Ok(())
    }

    fn refresh_policy(&mut self) {
        self.pi = PolicyTable::from_logits(self.n_states(), self.n_actions(), &self.theta);
    }

    /// `π_θ`.
    pub fn policy(&self) -> &PolicyTable {
        &self.pi
    }

    pub fn greedy_policy(&self) -> PolicyTable {
        greedy_from(&self.theta, self.n_states(), self.n_actions())
    }

    pub fn critics(&self) -> &[QTable; 2] {
        &self.critics
    }

    pub fn critics_mut(&mut self) -> &mut [QTable; 2] {
        &mut self.critics
    }

    pub fn targets(&self) -> &TargetCritics {
        &self.targets
    }

    pub fn targets_mut(&mut self) -> &mut TargetCritics {
        &mut self.targets
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn buffer_mut(&mut self) -> &mut ReplayBuffer {
        &mut self.buffer
    }

    /// `min(Q_1, Q_2)` of the live critics.
    pub fn min_q(&self) -> QTable {
        let (ns, na) = (self.n_states(), self.n_actions());
        let v = self.critics[0]
            .as_slice()
            .iter()
            .zip(self.critics[1].as_slice())
            .map(|(a, b)| a.min(*b))
            .collect();
        QTable::from_vec(ns, na, v).expect("finite critics")
    }

    pub fn act(&self, s: usize, rng: &mut SeededRng) -> usize {
        rng.categorical(self.pi.row(s))
    }

    /// `Δ(s')`: exact when `exact_delta` is set, otherwise averaged over
    /// `model_samples` draws.
    pub fn delta(&self, model: &VariationalModel, s_next: usize, rng: &mut SeededRng) -> f64 {
        if self.params.exact_delta {
            delta_exact(model, &self.pi, s_next)
        } else {
            delta_sampled(model, &self.pi, s_next, self.params.model_samples, rng)
        }
    }

    /// Squared-error step for both critics toward the shared target; returns
    /// the pre-step loss averaged over the two critics.
    pub fn critic_update(&mut self, model: &VariationalModel, batch: &[Transition], rng: &mut SeededRng) -> Result<(f64, f64)> {
        let weighted: Vec<(Transition, f64)> = batch.iter().map(|t| (*t, 1.0)).collect();
        self.critic_update_weighted(model, &weighted, rng)
    }

    /// Weighted form: the loss is `Σ w (Q − y)² / Σ w`. Returns
    /// `(loss, weighted mean Δ)`.
    pub fn critic_update_weighted(&mut self, model: &VariationalModel, batch: &[(Transition, f64)], rng: &mut SeededRng) -> Result<(f64, f64)> {
        if batch.is_empty() {
            return Err(GioError::Empty("critic batch"));
        }
        let (eta, gamma) = (self.params.eta, self.gamma);
        let mut exact_cache: BTreeMap<usize, f64> = BTreeMap::new();
        let mut targets = Vec::with_capacity(batch.len());
        let (mut wsum, mut dsum) = (0.0, 0.0);
        for (t, w) in batch {
            let delta = if eta == 0.0 {
                0.0
            } else if self.params.exact_delta {
                *exact_cache.entry(t.s_next).or_insert_with(|| delta_exact(model, &self.pi, t.s_next))
            } else {
                delta_sampled(model, &self.pi, t.s_next, self.params.model_samples, rng)
            };
            let y = td_target(&self.targets, self.pi.row(t.s_next), self.reward_atoms[t.atom], t.s_next, delta, gamma, eta);
            targets.push(y);
            wsum += w;
            dsum += w * delta;
        }
        let mut loss = 0.0;
        for critic in &mut self.critics {
            let mut grad: BTreeMap<(usize, usize), f64> = BTreeMap::new();
            for ((t, w), y) in batch.iter().zip(&targets) {
                let err = critic.get(t.s, t.a) - y;
                loss += w * err * err;
                *grad.entry((t.s, t.a)).or_insert(0.0) += 2.0 * w * err;
            }
            for ((s, a), g) in grad {
                let v = critic.get(s, a) - self.params.lr_critic * g / wsum;
                critic.set(s, a, v);
            }
        }
        Ok((loss / (2.0 * wsum), dsum / wsum))
    }

    /// Actor target rows `𝒢(min_i Q_i, q_φ)(·|s)`. With `η = 0` the target is
    /// uniform over the greedy actions of `min_i Q_i`.
    pub fn actor_target(&self, model: &VariationalModel, s: usize) -> Vec<f64> {
        let na = self.n_actions();
        let q: Vec<f64> = (0..na).map(|a| self.critics[0].get(s, a).min(self.critics[1].get(s, a))).collect();
        let eta = self.params.eta;
        if eta == 0.0 {
            let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let winners: Vec<bool> = q.iter().map(|&x| x >= best - 1e-12).collect();
            let n = winners.iter().filter(|&&w| w).count() as f64;
            return winners.iter().map(|&w| if w { 1.0 / n } else { 0.0 }).collect();
        }
        let elq = expected_log_q(model, s);
        let logits: Vec<f64> = q.iter().zip(&elq).map(|(qa, e)| qa / eta + e).collect();
        softmax(&logits)
    }

    /// Mean loss over `states` and its gradient in `θ`.
    ///
    /// For `η > 0` the loss is `KL(π_θ ‖ 𝒢)` with gradient
    /// `π_b (log π_b − log 𝒢_b − KL)`; for `η = 0` it is `KL(𝒢 ‖ π_θ)` with
    /// gradient `π_b − 𝒢_b`, since the greedy target has zeros.
    pub fn actor_gradient(&self, model: &VariationalModel, states: &[usize]) -> Result<(f64, Vec<f64>)> {
        if states.is_empty() {
            return Err(GioError::Empty("actor batch"));
        }
        let na = self.n_actions();
        let mut grad = vec![0.0; self.theta.len()];
        let mut cache: BTreeMap<usize, (f64, Vec<f64>)> = BTreeMap::new();
        let w = 1.0 / states.len() as f64;
        let mut loss = 0.0;
        for &s in states {
            let (l, g) = cache.entry(s).or_insert_with(|| {
                let target = self.actor_target(model, s);
                let pi = self.pi.row(s);
                if self.params.eta == 0.0 {
                    let l: f64 = target
                        .iter()
                        .zip(pi)
                        .filter(|(g, _)| **g > 0.0)
                        .map(|(g, p)| g * (g.ln() - p.max(crate::numeric::PROB_FLOOR).ln()))
                        .sum();
                    (l, pi.iter().zip(&target).map(|(p, g)| p - g).collect())
                } else {
                    let lpi = log_softmax(&self.theta[s * na..(s + 1) * na]);
                    let lg: Vec<f64> = target.iter().map(|g| g.max(crate::numeric::PROB_FLOOR).ln()).collect();
                    let kl: f64 = pi.iter().zip(lpi.iter().zip(&lg)).map(|(p, (a, b))| p * (a - b)).sum();
                    (kl, (0..na).map(|b| pi[b] * (lpi[b] - lg[b] - kl)).collect())
                }
            });
            loss += w * *l;
            for (dst, d) in grad[s * na..(s + 1) * na].iter_mut().zip(g.iter()) {
                *dst += w * d;
            }
        }
        Ok((loss, grad))
    }

    /// One descent step on [`actor_gradient`](Self::actor_gradient); returns the pre-step loss.
    pub fn actor_update(&mut self, model: &VariationalModel, states: &[usize]) -> Result<f64> {
        let (loss, grad) = self.actor_gradient(model, states)?;
        for (t, g) in self.theta.iter_mut().zip(&grad) {
            *t -= self.params.lr_actor * g;
        }
        self.refresh_policy();
        Ok(loss)
    }

    /// Next states of `plan_batch` one-step simulations from buffer states
    /// under `π_θ` and `p_ψ`.
    pub fn plan_states(&self, model: &VariationalModel, rng: &mut SeededRng) -> Result<Vec<usize>> {
        let starts = self.buffer.sample(self.params.plan_batch, rng)?;
        Ok(starts
            .iter()
            .map(|t| {
                let a = self.act(t.s, rng);
                model.sample_outcome(t.s, a, rng).0
            })
            .collect())
    }

    /// Actor step on simulated states. Skipped (with a warning) while the
    /// model has never been trained.
    pub fn plan_update(&mut self, model: &VariationalModel, rng: &mut SeededRng) -> Result<Option<f64>> {
        if !model.is_trained() {
            log::warn!("planning skipped: the generative model has not been trained");
            return Ok(None);
        }
        let states = self.plan_states(model, rng)?;
        self.actor_update(model, &states).map(Some)
    }

    /// `w̄ ← (1 − τ) w̄ + τ w` for both pairs.
    pub fn polyak(&mut self) {
        let tau = self.params.tau;
        for (target, live) in [(&mut self.targets.q1, &self.critics[0]), (&mut self.targets.q2, &self.critics[1])] {
            for (x, w) in target.as_mut_slice().iter_mut().zip(live.as_slice()) {
                *x = (1.0 - tau) * *x + tau * w;
            }
        }
    }

    /// One agent improvement cycle with exact ingredients: the critic batch
    /// is every `(s, a, s', k)` weighted by its true probability, `Δ` is
    /// exact, targets are copied after every critic step, and the actor is
    /// stepped on all states until it reaches `𝒢`.
    pub fn exact_cycle(&mut self, env: &TabularMdp, model: &VariationalModel, tol: f64, max_iters: usize) -> Result<CycleReport> {
        let (ns, na) = (self.n_states(), self.n_actions());
        let mut batch = Vec::new();
        for s in 0..ns {
            for a in 0..na {
                for (s_next, &p) in env.transition_row(s, a).iter().enumerate() {
                    for (atom, &r) in env.reward_row(s, a).iter().enumerate() {
                        if p * r > 0.0 {
                            batch.push((Transition { s, a, atom, s_next }, p * r));
                        }
                    }
                }
            }
        }
        let saved = self.params.clone();
        self.params.exact_delta = true;
        self.params.tau = 1.0;
        // each (s, a) carries weight 1 out of ns·na, so this makes a step a full replacement
        self.params.lr_critic = (ns * na) as f64 / 2.0;
        let mut rng = SeededRng::new(0);
        let mut critic_iters = 0;
        loop {
            let before = self.critics[0].clone();
            self.critic_update_weighted(model, &batch, &mut rng)?;
            self.polyak();
            critic_iters += 1;
            let change = self.critics[0].sup_dist(&before);
            if change < tol {
                break;
            }
            if critic_iters >= max_iters {
                self.params = saved;
                return Err(GioError::NotConverged {
                    iters: critic_iters,
                    residual: change,
                });
            }
        }
        let states: Vec<usize> = (0..ns).collect();
        self.params.lr_actor = ns as f64;
        let target: Vec<Vec<f64>> = states.iter().map(|&s| self.actor_target(model, s)).collect();
        let mut actor_iters = 0;
        let gap = |pi: &PolicyTable| {
            (0..ns)
                .flat_map(|s| (0..na).map(move |a| (s, a)))
                .map(|(s, a)| (pi.prob(s, a) - target[s][a]).abs())
                .fold(0.0f64, f64::max)
        };
        while gap(&self.pi) > tol && actor_iters < max_iters {
            self.actor_update(model, &states)?;
            actor_iters += 1;
        }
        let actor_gap = gap(&self.pi);
        self.params = saved;
        Ok(CycleReport {
            q: self.min_q(),
            policy: self.pi.clone(),
            critic_iters,
            actor_iters,
            actor_gap,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CycleReport {
    pub q: QTable,
    pub policy: PolicyTable,
    pub critic_iters: usize,
    pub actor_iters: usize,
    /// `max |π_θ − 𝒢|` when the actor loop stopped.
    pub actor_gap: f64,
}

fn greedy_from(values: &[f64], ns: usize, na: usize) -> PolicyTable {
    let mut probs = vec![0.0; ns * na];
    for s in 0..ns {
        probs[s * na + argmax(&values[s * na..(s + 1) * na])] = 1.0;
    }
    PolicyTable::new(ns, na, probs).expect("one-hot rows")
}

/// Twin-critic agent without the model or the intrinsic term, used as the
/// reference for the `η = 0` ablation. Written separately from [`Agent`].
#[derive(Clone, Debug)]
pub struct BaselineAgent {
    params: AgentParams,
    gamma: f64,
    reward_atoms: Vec<f64>,
    theta: Vec<f64>,
    pi: PolicyTable,
    q: [QTable; 2],
    targets: TargetCritics,
    buffer: ReplayBuffer,
}

impl BaselineAgent {
    pub fn new(env: &TabularMdp, params: AgentParams) -> Result<Self> {
        params.validate()?;
        let (ns, na) = (env.n_states(), env.n_actions());
        Ok(Self {
            gamma: params.gamma.unwrap_or(env.gamma()),
            buffer: ReplayBuffer::new(params.buffer_capacity)?,
            params,
            reward_atoms: env.reward_atoms().to_vec(),
            theta: vec![0.0; ns * na],
            pi: PolicyTable::uniform(ns, na),
            q: [QTable::zeros(ns, na), QTable::zeros(ns, na)],
            targets: TargetCritics {
                q1: QTable::zeros(ns, na),
                q2: QTable::zeros(ns, na),
            },
        })
    }

    pub fn policy(&self) -> &PolicyTable {
        &self.pi
    }

    fn learn(&mut self, rng: &mut SeededRng) -> Result<StepStats> {
        let batch = self.buffer.sample(self.params.batch_size, rng)?;
        let n = batch.len() as f64;
        let ys: Vec<f64> = batch
            .iter()
            .map(|t| self.reward_atoms[t.atom] + self.gamma * self.targets.expected_min(self.pi.row(t.s_next), t.s_next))
            .collect();
        let mut loss = 0.0;
        for q in &mut self.q {
            let mut step = BTreeMap::new();
            for (t, y) in batch.iter().zip(&ys) {
                let e = q.get(t.s, t.a) - y;
                loss += e * e / (2.0 * n);
                *step.entry((t.s, t.a)).or_insert(0.0) += 2.0 * e / n;
            }
            for ((s, a), g) in step {
                q.set(s, a, q.get(s, a) - self.params.lr_critic * g);
            }
        }
        // Move the policy toward the greedy action of the pessimistic critic.
        let na = self.pi.n_actions();
        let mut kl = 0.0;
        let mut dtheta = vec![0.0; self.theta.len()];
        for t in &batch {
            let s = t.s;
            let vals: Vec<f64> = (0..na).map(|a| self.q[0].get(s, a).min(self.q[1].get(s, a))).collect();
            let best = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ties = vals.iter().filter(|&&v| v >= best - 1e-12).count() as f64;
            for a in 0..na {
                let g = if vals[a] >= best - 1e-12 { 1.0 / ties } else { 0.0 };
                if g > 0.0 {
                    kl += g * (g.ln() - self.pi.prob(s, a).max(crate::numeric::PROB_FLOOR).ln()) / n;
                }
                dtheta[s * na + a] += (self.pi.prob(s, a) - g) / n;
            }
        }
        for (x, d) in self.theta.iter_mut().zip(&dtheta) {
            *x -= self.params.lr_actor * d;
        }
        self.pi = PolicyTable::from_logits(self.pi.n_states(), na, &self.theta);
        let tau = self.params.tau;
        for (tq, q) in [(&mut self.targets.q1, &self.q[0]), (&mut self.targets.q2, &self.q[1])] {
            for (x, w) in tq.as_mut_slice().iter_mut().zip(q.as_slice()) {
                *x += tau * (w - *x);
            }
        }
        Ok(StepStats {
            critic_loss: Some(loss),
            actor_kl: Some(kl),
            ..StepStats::default()
        })
    }
}

/// One evaluation point of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub step: usize,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub elbo: f64,
    pub delta_mean: f64,
    pub critic_loss: f64,
    pub actor_kl: f64,
    pub greedy_return_mean: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub rows: Vec<RunRow>,
    pub final_policy: PolicyTable,
    pub plan_updates: usize,
}

impl RunOutput {
    pub fn final_return(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.eval_return_mean)
    }
}

#[derive(Default)]
struct Accum {
    sums: [f64; 4],
    counts: [usize; 4],
}

impl Accum {
    fn add(&mut self, st: &StepStats) {
        for (i, v) in [st.elbo, st.delta_mean, st.critic_loss, st.actor_kl].into_iter().enumerate() {
            if let Some(v) = v {
                self.sums[i] += v;
                self.counts[i] += 1;
            }
        }
    }

    fn take(&mut self) -> [f64; 4] {
        let out = std::array::from_fn(|i| if self.counts[i] > 0 { self.sums[i] / self.counts[i] as f64 } else { f64::NAN });
        *self = Self::default();
        out
    }
}

/// Undiscounted returns of `episodes` rollouts of length `horizon` from the
/// initial distribution.
pub fn rollout_returns(env: &TabularMdp, pi: &PolicyTable, episodes: usize, horizon: usize, rng: &mut SeededRng) -> Result<Vec<f64>> {
    let atoms = env.reward_atoms();
    (0..episodes)
        .map(|_| {
            let mut s = env.sample_initial(rng);
            let mut total = 0.0;
            for _ in 0..horizon {
                let a = rng.categorical(pi.row(s));
                let (next, atom) = step_atom(env, s, a, rng)?;
                total += atoms[atom];
                s = next;
            }
            Ok(total)
        })
        .collect()
}

/// Expected undiscounted `horizon`-step return of `pi` from the initial
/// distribution, by propagating the state distribution.
pub fn expected_return(env: &TabularMdp, pi: &PolicyTable, horizon: usize) -> f64 {
    let (ns, na) = (env.n_states(), env.n_actions());
    let mut d = env.initial_dist().to_vec();
    let mut total = 0.0;
    for _ in 0..horizon {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            if d[s] == 0.0 {
                continue;
            }
            for a in 0..na {
                let w = d[s] * pi.prob(s, a);
                total += w * env.expected_reward(s, a);
                for (n, p) in next.iter_mut().zip(env.transition_row(s, a)) {
                    *n += w * p;
                }
            }
        }
        d = next;
    }
    total
}

fn eval_row(env: &TabularMdp, pi: &PolicyTable, greedy: &PolicyTable, params: &AgentParams, step: usize, seed: u64, stats: [f64; 4]) -> Result<RunRow> {
    // evaluation draws from its own stream so it never perturbs training
    let mut rng = SeededRng::new(crate::rng::derive_seed(seed ^ 0x5EED_0E7A, step as u64));
    let returns = rollout_returns(env, pi, params.eval_episodes, params.eval_horizon, &mut rng)?;
    let greedy_returns = rollout_returns(env, greedy, params.eval_episodes, params.eval_horizon, &mut rng)?;
    let (mean, std) = mean_std(&returns);
    Ok(RunRow {
        step,
        eval_return_mean: mean,
        eval_return_std: std,
        elbo: stats[0],
        delta_mean: stats[1],
        critic_loss: stats[2],
        actor_kl: stats[3],
        greedy_return_mean: mean_std(&greedy_returns).0,
    })
}

/// One VAE gradient step on a replay minibatch.
fn model_step(agent: &Agent, model: &mut VariationalModel, opt: &mut Optimizer, rng: &mut SeededRng) -> Result<f64> {
    let batch = agent.buffer.sample(agent.params.model_batch_size, rng)?;
    let mut grads = Vec::with_capacity(batch.len());
    let mut total = 0.0;
    for t in &batch {
        let (v, mut g) = training_grad(model, &agent.pi, t)?;
        if agent.params.freeze_inference {
            g.phi.fill(0.0);
        }
        total += v;
        grads.push(g);
    }
    opt.step(model, &grads);
    Ok(total / batch.len() as f64)
}

/// The main loop: act, store, train the model, update critics and actor,
/// plan on schedule, move the targets, and evaluate every `eval_every`
/// steps (and at the end).
pub fn run(agent: &mut Agent, env: &TabularMdp, model: &mut VariationalModel, steps: usize, seed: u64) -> Result<RunOutput> {
    if env.n_states() != agent.n_states() || env.n_actions() != agent.n_actions() {
        return Err(GioError::DimensionMismatch("agent shape does not match the environment".into()));
    }
    if model.n_states() != env.n_states() || model.n_actions() != env.n_actions() || model.n_atoms() != env.n_atoms() {
        return Err(GioError::DimensionMismatch("model shape does not match the environment".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut opt = Optimizer::new(agent.params.lr_model, 0.0);
    let mut acc = Accum::default();
    let mut rows = Vec::new();
    let mut plan_updates = 0;
    let mut s = env.sample_initial(&mut rng);
    let start = agent.params.warmup.max(agent.params.batch_size);
    for step in 1..=steps {
        let a = agent.act(s, &mut rng);
        let (s_next, atom) = step_atom(env, s, a, &mut rng)?;
        agent.buffer.push(Transition { s, a, atom, s_next });
        s = s_next;
        if agent.buffer.len() >= start {
            let mut st = StepStats {
                elbo: Some(model_step(agent, model, &mut opt, &mut rng)?),
                ..StepStats::default()
            };
            let batch = agent.buffer.sample(agent.params.batch_size, &mut rng)?;
            if step % agent.params.critic_every == 0 {
                let (loss, d) = agent.critic_update(model, &batch, &mut rng)?;
                st.critic_loss = Some(loss);
                st.delta_mean = Some(d);
            }
            if step % agent.params.actor_every == 0 {
                let states: Vec<usize> = batch.iter().map(|t| t.s).collect();
                st.actor_kl = Some(agent.actor_update(model, &states)?);
            }
            if agent.params.plan_every.is_some_and(|k| step % k == 0) && agent.plan_update(model, &mut rng)?.is_some() {
                plan_updates += 1;
            }
            if step % agent.params.target_every == 0 {
                agent.polyak();
            }
            acc.add(&st);
        }
        if step % agent.params.eval_every == 0 || step == steps {
            rows.push(eval_row(env, &agent.pi, &agent.greedy_policy(), &agent.params, step, seed, acc.take())?);
        }
    }
    Ok(RunOutput {
        rows,
        final_policy: agent.pi.clone(),
        plan_updates,
    })
}

/// Same loop for [`BaselineAgent`]; the ELBO and Δ columns are NaN.
pub fn run_baseline(agent: &mut BaselineAgent, env: &TabularMdp, steps: usize, seed: u64) -> Result<RunOutput> {
    let mut rng = SeededRng::new(seed);
    let mut acc = Accum::default();
    let mut rows = Vec::new();
    let mut s = env.sample_initial(&mut rng);
    let start = agent.params.warmup.max(agent.params.batch_size);
    for step in 1..=steps {
        let a = rng.categorical(agent.pi.row(s));
        let (s_next, atom) = step_atom(env, s, a, &mut rng)?;
        agent.buffer.push(Transition { s, a, atom, s_next });
        s = s_next;
        if agent.buffer.len() >= start {
            let st = agent.learn(&mut rng)?;
            acc.add(&st);
        }
        if step % agent.params.eval_every == 0 || step == steps {
            let greedy = greedy_from(&agent.theta, agent.pi.n_states(), agent.pi.n_actions());
            rows.push(eval_row(env, &agent.pi, &greedy, &agent.params, step, seed, acc.take())?);
        }
    }
    Ok(RunOutput {
        rows,
        final_policy: agent.pi.clone(),
        plan_updates: 0,
    })
}
