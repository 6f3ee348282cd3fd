//! Multi-seed experiment runs: per-seed CSVs plus `summary.json`.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use gio_core::agent::{run, Agent, RunOutput};
use gio_core::baselines::{soft_policy_iteration, standard_policy_iteration, PolicyIterationResult};
use gio_core::mdp::TabularMdp;
use gio_core::rng::SeededRng;
use gio_core::solver::{policy_iteration, SolveResult};
use gio_core::tables::{PolicyTable, QTable};
use gio_core::variational::VariationalModel;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{load_env, Algorithm, ExperimentConfig, InitPolicy};
use crate::table::{nullable, Stats, Table};

pub const SOLVE_COLUMNS: [&str; 7] = [
    "sweep",
    "bellman_residual",
    "min_q_delta",
    "mi_mean",
    "objective",
    "fixed_point_kl",
    "assumption3_term",
];

pub const BASELINE_COLUMNS: [&str; 3] = ["sweep", "q_change", "objective"];

pub const RETURN_COLUMNS: [&str; 8] = [
    "step",
    "eval_return_mean",
    "eval_return_std",
    "elbo",
    "delta_mean",
    "critic_loss",
    "actor_kl",
    "greedy_return_mean",
];

/// `v0.1.0`, with `-g<rev>` appended when built with `GIO_GIT_REV` set.
pub fn artifact_version() -> String {
    let base = concat!("v", env!("CARGO_PKG_VERSION"));
    match option_env!("GIO_GIT_REV") {
        Some(rev) if !rev.is_empty() => format!("{base}-g{rev}"),
        _ => base.to_string(),
    }
}

pub fn solve_table(res: &SolveResult) -> Table {
    let mut t = Table::new(&SOLVE_COLUMNS);
    for r in &res.trace.records {
        t.push(vec![
            r.sweep as f64,
            r.bellman_residual,
            r.min_q_delta,
            r.mi_mean,
            r.objective,
            r.fixed_point_kl,
            r.assumption3_term,
        ]);
    }
    t
}

pub fn returns_table(out: &RunOutput) -> Table {
    let mut t = Table::new(&RETURN_COLUMNS);
    for r in &out.rows {
        t.push(vec![
            r.step as f64,
            r.eval_return_mean,
            r.eval_return_std,
            r.elbo,
            r.delta_mean,
            r.critic_loss,
            r.actor_kl,
            r.greedy_return_mean,
        ]);
    }
    t
}

fn objective(mdp: &TabularMdp, q: &QTable, pi: &PolicyTable, bonus: impl Fn(usize) -> f64) -> f64 {
    (0..mdp.n_states())
        .map(|s| {
            let v: f64 = pi.row(s).iter().zip(q.row(s)).map(|(p, x)| p * x).sum::<f64>() + bonus(s);
            mdp.initial_dist()[s] * v
        })
        .sum()
}

fn baseline_table(mdp: &TabularMdp, res: &PolicyIterationResult, eta: Option<f64>) -> Table {
    let mut t = Table::new(&BASELINE_COLUMNS);
    for (k, (q, pi)) in res.q_history.iter().zip(&res.policies).enumerate() {
        let change = if k == 0 { f64::NAN } else { q.sup_dist(&res.q_history[k - 1]) };
        let obj = objective(mdp, q, pi, |s| eta.map_or(0.0, |e| e * gio_core::numeric::entropy(pi.row(s))));
        t.push(vec![k as f64, change, obj]);
    }
    t
}

/// Everything one seed produces.
#[derive(Clone, Debug)]
pub struct SeedOutput {
    pub seed: u64,
    pub table: Table,
    pub converged: bool,
    pub policy: PolicyTable,
    /// Per-sweep Q tables of the exact algorithms.
    pub q_history: Vec<QTable>,
    pub model: Option<VariationalModel>,
}

fn initial_policy(cfg: &ExperimentConfig, mdp: &TabularMdp, seed: u64) -> PolicyTable {
    match cfg.init {
        InitPolicy::Uniform => PolicyTable::uniform(mdp.n_states(), mdp.n_actions()),
        InitPolicy::Random => PolicyTable::random_positive(mdp.n_states(), mdp.n_actions(), 0.5, &mut SeededRng::new(seed)),
    }
}

pub fn run_seed(cfg: &ExperimentConfig, mdp: &TabularMdp, seed: u64) -> Result<SeedOutput> {
    let pi0 = initial_policy(cfg, mdp, seed);
    let s = &cfg.solver;
    Ok(match cfg.algorithm {
        Algorithm::GioExact => {
            let res = policy_iteration(mdp, &pi0, s)?;
            SeedOutput {
                seed,
                table: solve_table(&res),
                converged: res.converged,
                policy: res.policy.clone(),
                q_history: res.q_history,
                model: None,
            }
        }
        Algorithm::SoftPi => {
            let res = soft_policy_iteration(mdp, &pi0, s.eta, s.outer_max_sweeps, s.outer_tol)?;
            SeedOutput {
                seed,
                table: baseline_table(mdp, &res, Some(s.eta)),
                converged: res.converged,
                policy: res.policy().clone(),
                q_history: res.q_history,
                model: None,
            }
        }
        Algorithm::StandardPi => {
            let res = standard_policy_iteration(mdp, &pi0, s.outer_max_sweeps)?;
            SeedOutput {
                seed,
                table: baseline_table(mdp, &res, None),
                converged: res.converged,
                policy: res.policy().clone(),
                q_history: res.q_history,
                model: None,
            }
        }
        Algorithm::GioAgent => {
            let mut agent = Agent::new(mdp, cfg.agent.clone())?;
            let mut model = VariationalModel::for_mdp(mdp);
            let out = run(&mut agent, mdp, &mut model, cfg.steps, seed)?;
            let table = returns_table(&out);
            let finite = out.rows.iter().all(|r| r.eval_return_mean.is_finite());
            SeedOutput {
                seed,
                table,
                converged: finite,
                policy: out.final_policy,
                q_history: Vec::new(),
                model: Some(model),
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub converged: bool,
    pub csv: String,
    /// Every CSV column, NaN written as null.
    pub series: BTreeMap<String, Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub version: String,
    pub algorithm: Algorithm,
    pub env: String,
    pub runs: Vec<SeedRecord>,
    /// Statistics across seeds of each column's final value.
    pub summary: BTreeMap<String, Stats>,
}

impl RunRecord {
    pub fn all_converged(&self) -> bool {
        self.runs.iter().all(|r| r.converged)
    }
}

/// Final-row statistics of every column but the first (the index column).
pub fn summarize(tables: &[&Table]) -> BTreeMap<String, Stats> {
    let mut out = BTreeMap::new();
    if let Some(first) = tables.first() {
        for col in first.columns.iter().skip(1) {
            let finals: Vec<f64> = tables.iter().map(|t| t.last(col).unwrap_or(f64::NAN)).collect();
            out.insert(col.clone(), Stats::of(&finals));
        }
    }
    out
}

/// Worker pool capped by `GIO_THREADS` when set.
pub fn pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("GIO_THREADS") {
        let n: usize = v.parse().with_context(|| format!("GIO_THREADS=`{v}` is not a count"))?;
        b = b.num_threads(n.max(1));
    }
    Ok(b.build()?)
}

fn rows_json(rows: Vec<Vec<f64>>) -> String {
    serde_json::to_string_pretty(&rows).expect("finite rows")
}

pub fn write_policy(path: &Path, pi: &PolicyTable) -> Result<()> {
    std::fs::write(path, rows_json(pi.rows())).with_context(|| format!("writing {}", path.display()))
}

pub fn q_rows(q: &QTable) -> Vec<Vec<f64>> {
    (0..q.n_states()).map(|s| q.row(s).to_vec()).collect()
}

/// Runs every seed (in parallel, merged in seed order) and writes
/// `seed-<s>.csv`, `seed-<s>-policy.json`, `seed-<s>-q.json` (exact
/// algorithms), `seed-<s>-model.json` (agent) and `summary.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let mdp = load_env(&cfg.env)?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let outputs: Vec<SeedOutput> = pool()?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| run_seed(cfg, &mdp, seed))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut runs = Vec::new();
    for o in &outputs {
        let csv = format!("seed-{}.csv", o.seed);
        o.table.write_csv(&dir.join(&csv))?;
        write_policy(&dir.join(format!("seed-{}-policy.json", o.seed)), &o.policy)?;
        if !o.q_history.is_empty() {
            let hist: Vec<Vec<Vec<f64>>> = o.q_history.iter().map(q_rows).collect();
            std::fs::write(dir.join(format!("seed-{}-q.json", o.seed)), serde_json::to_string(&hist)?)?;
        }
        if let Some(m) = &o.model {
            m.save(dir.join(format!("seed-{}-model.json", o.seed)))?;
        }
        if !o.converged {
            log::warn!("seed {} did not converge", o.seed);
        }
        let series = o
            .table
            .columns
            .iter()
            .map(|c| (c.clone(), nullable(&o.table.column(c).expect("own column"))))
            .collect();
        runs.push(SeedRecord {
            seed: o.seed,
            converged: o.converged,
            csv,
            series,
        });
    }
    let tables: Vec<&Table> = outputs.iter().map(|o| &o.table).collect();
    let record = RunRecord {
        config_hash: cfg.hash(),
        version: artifact_version(),
        algorithm: cfg.algorithm,
        env: cfg.env.clone(),
        runs,
        summary: summarize(&tables),
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&record)?)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(record)
}
