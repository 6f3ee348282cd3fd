//! Seeded benchmark MDPs, each built to hit a particular analytic corner.
//!
//! Specs are written as calls, e.g. `gridworld(5,0.1)` or `random(4,3,2,7)`,
//! and round-trip through [`EnvSpec`]'s `Display`/`FromStr`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{GioError, Result};
use crate::mdp::TabularMdp;
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq)]
pub enum EnvSpec {
    /// `n × n` grid, actions up/right/down/left, slip `eps`. Any action in the
    /// bottom-right goal pays 1 and returns to the top-left start.
    Gridworld { n: usize, slip: f64 },
    /// `n` states in a line, actions left/right. Left at the first state pays
    /// 0.1; right at the last pays 1 and returns to the first.
    Chain { n: usize },
    /// Dirichlet(1) transition and reward rows, atoms uniform in `[0, 1)`.
    Random { states: usize, actions: usize, atoms: usize, seed: u64 },
    /// Dynamics and rewards shared by every action.
    Uninformative { states: usize, actions: usize },
    /// Deterministic `s' = (s + a) mod S`, reward 1 on reaching state 0.
    Invertible { states: usize, actions: usize },
    /// Half the states are a small informative ring; action 0 jumps to a
    /// noise region whose transitions ignore the action.
    NoisyTv { states: usize, actions: usize },
}

impl EnvSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::Gridworld { .. } => "gridworld",
            EnvSpec::Chain { .. } => "chain",
            EnvSpec::Random { .. } => "random",
            EnvSpec::Uninformative { .. } => "uninformative",
            EnvSpec::Invertible { .. } => "invertible",
            EnvSpec::NoisyTv { .. } => "noisy_tv",
        }
    }

    pub fn make(&self) -> Result<TabularMdp> {
        match *self {
            EnvSpec::Gridworld { n, slip } => gridworld(n, slip),
            EnvSpec::Chain { n } => chain(n),
            EnvSpec::Random {
                states,
                actions,
                atoms,
                seed,
            } => random(states, actions, atoms, seed),
            EnvSpec::Uninformative { states, actions } => uninformative(states, actions),
            EnvSpec::Invertible { states, actions } => invertible(states, actions),
            EnvSpec::NoisyTv { states, actions } => noisy_tv(states, actions),
        }
    }
}

/// Parses and builds in one step.
pub fn make(spec: &str) -> Result<TabularMdp> {
    spec.parse::<EnvSpec>()?.make()
}

impl fmt::Display for EnvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvSpec::Gridworld { n, slip } => write!(f, "gridworld({n},{slip})"),
            EnvSpec::Chain { n } => write!(f, "chain({n})"),
            EnvSpec::Random {
                states,
                actions,
                atoms,
                seed,
            } => write!(f, "random({states},{actions},{atoms},{seed})"),
            EnvSpec::Uninformative { states, actions } => write!(f, "uninformative({states},{actions})"),
            EnvSpec::Invertible { states, actions } => write!(f, "invertible({states},{actions})"),
            EnvSpec::NoisyTv { states, actions } => write!(f, "noisy_tv({states},{actions})"),
        }
    }
}

fn bad(msg: impl Into<String>) -> GioError {
    GioError::InvalidEnvParams(msg.into())
}

fn int(arg: &str) -> Result<usize> {
    arg.parse().map_err(|_| bad(format!("`{arg}` is not a nonnegative integer")))
}

impl FromStr for EnvSpec {
    type Err = GioError;

    fn from_str(text: &str) -> Result<Self> {
        let text = text.trim();
        let (name, args) = match text.find('(') {
            Some(i) if text.ends_with(')') => (&text[..i], &text[i + 1..text.len() - 1]),
            _ => (text, ""),
        };
        let args: Vec<&str> = args.split(',').map(str::trim).filter(|a| !a.is_empty()).collect();
        let arity = |lo: usize, hi: usize| {
            if args.len() < lo || args.len() > hi {
                Err(bad(format!("{name} takes {lo}..={hi} arguments, got {}", args.len())))
            } else {
                Ok(())
            }
        };
        match name {
            "gridworld" => {
                arity(1, 2)?;
                let slip = match args.get(1) {
                    Some(a) => a.parse().map_err(|_| bad(format!("`{a}` is not a number")))?,
                    None => 0.0,
                };
                Ok(EnvSpec::Gridworld { n: int(args[0])?, slip })
            }
            "chain" => {
                arity(1, 1)?;
                Ok(EnvSpec::Chain { n: int(args[0])? })
            }
            "random" => {
                arity(4, 4)?;
                Ok(EnvSpec::Random {
                    states: int(args[0])?,
                    actions: int(args[1])?,
                    atoms: int(args[2])?,
                    seed: args[3].parse().map_err(|_| bad(format!("`{}` is not a seed", args[3])))?,
                })
            }
            "uninformative" => {
                arity(2, 2)?;
                Ok(EnvSpec::Uninformative {
                    states: int(args[0])?,
                    actions: int(args[1])?,
                })
            }
            "invertible" => {
                arity(1, 2)?;
                let states = int(args[0])?;
                let actions = args.get(1).map_or(Ok(states), |a| int(a))?;
                Ok(EnvSpec::Invertible { states, actions })
            }
            "noisy_tv" => {
                arity(2, 2)?;
                Ok(EnvSpec::NoisyTv {
                    states: int(args[0])?,
                    actions: int(args[1])?,
                })
            }
            other => Err(GioError::UnknownEnv(other.to_string())),
        }
    }
}

impl Serialize for EnvSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EnvSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Builder for dense tables indexed `[s][a][·]`.
struct Tables {
    ns: usize,
    na: usize,
    nk: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
}

impl Tables {
    fn new(ns: usize, na: usize, nk: usize) -> Self {
        Self {
            ns,
            na,
            nk,
            transition: vec![0.0; ns * na * ns],
            reward: vec![0.0; ns * na * nk],
        }
    }

    fn p(&mut self, s: usize, a: usize, sn: usize) -> &mut f64 {
        &mut self.transition[(s * self.na + a) * self.ns + sn]
    }

    fn r(&mut self, s: usize, a: usize, k: usize) -> &mut f64 {
        &mut self.reward[(s * self.na + a) * self.nk + k]
    }

    fn finish(self, gamma: f64, atoms: Vec<f64>, initial: Vec<f64>) -> Result<TabularMdp> {
        TabularMdp::new(self.ns, self.na, gamma, atoms, self.transition, self.reward, initial)
    }
}

fn point_mass(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

pub fn gridworld(n: usize, slip: f64) -> Result<TabularMdp> {
    if n < 2 {
        return Err(bad("gridworld needs n >= 2"));
    }
    if !(0.0..=1.0).contains(&slip) {
        return Err(bad(format!("slip {slip} not in [0, 1]")));
    }
    // up, right, down, left
    const MOVES: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];
    let ns = n * n;
    let goal = ns - 1;
    let mut t = Tables::new(ns, 4, 2);
    let target = |s: usize, m: usize| {
        let (row, col) = ((s / n) as isize, (s % n) as isize);
        let (r2, c2) = (row + MOVES[m].0, col + MOVES[m].1);
        if r2 < 0 || c2 < 0 || r2 >= n as isize || c2 >= n as isize {
            s
        } else {
            r2 as usize * n + c2 as usize
        }
    };
    for s in 0..ns {
        for a in 0..4 {
            if s == goal {
                *t.p(s, a, 0) = 1.0;
                *t.r(s, a, 1) = 1.0;
                continue;
            }
            *t.p(s, a, target(s, a)) += 1.0 - slip;
            *t.p(s, a, target(s, (a + 1) % 4)) += slip / 2.0;
            *t.p(s, a, target(s, (a + 3) % 4)) += slip / 2.0;
            *t.r(s, a, 0) = 1.0;
        }
    }
    t.finish(0.95, vec![0.0, 1.0], point_mass(ns, 0))
}

pub fn chain(n: usize) -> Result<TabularMdp> {
    if n < 2 {
        return Err(bad("chain needs n >= 2"));
    }
    let mut t = Tables::new(n, 2, 3);
    for s in 0..n {
        // left
        *t.p(s, 0, s.saturating_sub(1)) = 1.0;
        *t.r(s, 0, if s == 0 { 1 } else { 0 }) = 1.0;
        // right
        if s == n - 1 {
            *t.p(s, 1, 0) = 1.0;
            *t.r(s, 1, 2) = 1.0;
        } else {
            *t.p(s, 1, s + 1) = 1.0;
            *t.r(s, 1, 0) = 1.0;
        }
    }
    t.finish(0.95, vec![0.0, 0.1, 1.0], point_mass(n, 0))
}

pub fn random(states: usize, actions: usize, atoms: usize, seed: u64) -> Result<TabularMdp> {
    if states == 0 || actions == 0 || atoms == 0 {
        return Err(bad("random needs positive sizes"));
    }
    let mut rng = SeededRng::new(seed);
    let mut t = Tables::new(states, actions, atoms);
    for s in 0..states {
        for a in 0..actions {
            for (sn, p) in rng.dirichlet1(states).into_iter().enumerate() {
                *t.p(s, a, sn) = p;
            }
            for (k, p) in rng.dirichlet1(atoms).into_iter().enumerate() {
                *t.r(s, a, k) = p;
            }
        }
    }
    let atom_values = (0..atoms).map(|_| rng.uniform()).collect();
    t.finish(0.9, atom_values, vec![1.0 / states as f64; states])
}

pub fn uninformative(states: usize, actions: usize) -> Result<TabularMdp> {
    if states == 0 || actions == 0 {
        return Err(bad("uninformative needs positive sizes"));
    }
    let mut t = Tables::new(states, actions, 2);
    for s in 0..states {
        let hit = (s + 1) as f64 / (states + 1) as f64;
        for a in 0..actions {
            for sn in 0..states {
                *t.p(s, a, sn) = 0.5 / states as f64;
            }
            *t.p(s, a, (s + 1) % states) += 0.5;
            *t.r(s, a, 0) = 1.0 - hit;
            *t.r(s, a, 1) = hit;
        }
    }
    t.finish(0.9, vec![0.0, 1.0], vec![1.0 / states as f64; states])
}

pub fn invertible(states: usize, actions: usize) -> Result<TabularMdp> {
    if states == 0 || actions == 0 || actions > states {
        return Err(bad(format!(
            "invertible needs 1 <= actions <= states, got {states} states / {actions} actions"
        )));
    }
    let mut t = Tables::new(states, actions, 2);
    for s in 0..states {
        for a in 0..actions {
            let sn = (s + a) % states;
            *t.p(s, a, sn) = 1.0;
            *t.r(s, a, usize::from(sn == 0)) = 1.0;
        }
    }
    t.finish(0.9, vec![0.0, 1.0], point_mass(states, 0))
}

/// Number of ring states in `noisy_tv(states, _)`; the rest are noise.
pub fn noisy_tv_ring(states: usize) -> usize {
    states / 2
}

pub fn noisy_tv(states: usize, actions: usize) -> Result<TabularMdp> {
    if states < 4 || actions < 2 {
        return Err(bad("noisy_tv needs at least 4 states and 2 actions"));
    }
    let ring = noisy_tv_ring(states);
    let noise = states - ring;
    let mut t = Tables::new(states, actions, 2);
    for s in 0..states {
        for a in 0..actions {
            if s >= ring {
                for sn in ring..states {
                    *t.p(s, a, sn) = 0.9 / noise as f64;
                }
                *t.p(s, a, 0) += 0.1;
                *t.r(s, a, 0) = 1.0;
            } else if a == 0 {
                for sn in ring..states {
                    *t.p(s, a, sn) = 1.0 / noise as f64;
                }
                *t.r(s, a, 0) = 1.0;
            } else {
                let sn = (s + a) % ring;
                *t.p(s, a, sn) = 1.0;
                *t.r(s, a, usize::from(sn == ring - 1)) = 1.0;
            }
        }
    }
    t.finish(0.9, vec![0.0, 1.0], point_mass(states, 0))
}
