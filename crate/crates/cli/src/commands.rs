//! Subcommand arguments and handlers. Each handler returns `Ok(false)` when
//! it ran to completion but the result should fail the process (an
//! unconverged solve, a failed check).

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use gio_core::agent::{run, Agent, AgentParams};
use gio_core::future::FutureKind;
use gio_core::mdp::rollout;
use gio_core::rng::SeededRng;
use gio_core::solver::{policy_iteration, Mutation, SolverConfig};
use gio_core::tables::PolicyTable;
use gio_core::variational::{train, TrainConfig, VariationalModel};
use serde::Serialize;

use crate::config::{load_env, ExperimentConfig};
use crate::experiment::{q_rows, returns_table, run_experiment, solve_table, write_policy, SOLVE_COLUMNS};
use crate::svg::line_chart;
use crate::table::Table;
use crate::verify::{run_verify, Check};

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn write_chart(path: &Path, title: &str, table: &Table, columns: &[&str]) -> Result<()> {
    let x = table.column(&table.columns[0]).unwrap_or_default();
    let series: Vec<(&str, Vec<f64>)> = columns.iter().filter_map(|c| Some((*c, table.column(c)?))).collect();
    std::fs::write(path, line_chart(title, &x, &series)).with_context(|| format!("writing {}", path.display()))
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    /// Environment spec (`gridworld(5,0.1)`) or MDP JSON file.
    #[arg(long)]
    pub mdp: String,
    /// SolverConfig JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// one-step, next-state or k-step:K.
    #[arg(long)]
    pub future: Option<FutureKind>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
    /// Start from a random positive policy drawn from this seed instead of uniform.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write convergence.svg.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Serialize)]
struct Solution<'a> {
    converged: bool,
    sweeps: usize,
    objective: Option<f64>,
    fixed_point_kl: Option<f64>,
    config: &'a SolverConfig,
}

pub fn solve(a: &SolveArgs) -> Result<bool> {
    let mdp = load_env(&a.mdp)?;
    let mut cfg: SolverConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SolverConfig::default(),
    };
    if let Some(v) = a.eta {
        cfg.eta = v;
    }
    if let Some(v) = a.future {
        cfg.future = v;
    }
    if let Some(v) = a.tol {
        cfg.outer_tol = v;
    }
    if let Some(v) = a.max_sweeps {
        cfg.outer_max_sweeps = v;
    }
    cfg.validate()?;
    let pi0 = match a.seed {
        Some(s) => PolicyTable::random_positive(mdp.n_states(), mdp.n_actions(), 0.5, &mut SeededRng::new(s)),
        None => PolicyTable::uniform(mdp.n_states(), mdp.n_actions()),
    };
    let res = policy_iteration(&mdp, &pi0, &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    let table = solve_table(&res);
    table.write_csv(&a.out.join("trace.csv"))?;
    write_policy(&a.out.join("policy.json"), &res.policy)?;
    write_json(&a.out.join("q.json"), &q_rows(&res.q))?;
    let last = res.trace.last();
    write_json(
        &a.out.join("solution.json"),
        &Solution {
            converged: res.converged,
            sweeps: res.sweeps(),
            objective: last.map(|r| r.objective),
            fixed_point_kl: last.map(|r| r.fixed_point_kl),
            config: &cfg,
        },
    )?;
    if a.svg {
        write_chart(&a.out.join("convergence.svg"), &a.mdp, &table, &SOLVE_COLUMNS[1..5])?;
    }
    log::info!("{} sweeps, converged: {}", res.sweeps(), res.converged);
    Ok(res.converged)
}

#[derive(Args, Debug)]
pub struct TrainViArgs {
    #[arg(long)]
    pub mdp: String,
    /// Behaviour policy: `uniform` or a JSON file of probability rows.
    #[arg(long, default_value = "uniform")]
    pub policy: String,
    /// Transitions to collect from one rollout.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// TrainConfig JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub grad_check_every: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub const TRAIN_COLUMNS: [&str; 4] = ["epoch", "train_elbo", "heldout_elbo", "grad_check_rel_error"];

pub fn train_vi(a: &TrainViArgs) -> Result<bool> {
    let mdp = load_env(&a.mdp)?;
    let pi = if a.policy == "uniform" {
        PolicyTable::uniform(mdp.n_states(), mdp.n_actions())
    } else {
        PolicyTable::from_rows(read_json(Path::new(&a.policy))?)?
    };
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.grad_check_every {
        cfg.grad_check_interval = v;
    }
    let mut rng = SeededRng::new(a.seed);
    let data = rollout(&mdp, &pi, a.samples, &mut rng.fork(0))?;
    let mut model = VariationalModel::for_mdp(&mdp);
    let trace = train(&mut model, &pi, &data, &cfg, &mut rng)?;
    std::fs::create_dir_all(&a.out)?;
    let mut t = Table::new(&TRAIN_COLUMNS);
    for e in &trace.epochs {
        t.push(vec![e.epoch as f64, e.train_elbo, e.heldout_elbo, e.grad_check_rel_error.unwrap_or(f64::NAN)]);
    }
    t.write_csv(&a.out.join("train.csv"))?;
    model.save(a.out.join("checkpoint.json"))?;
    log::info!(
        "held-out ELBO {:.6} -> {:.6} over {} epochs",
        trace.initial_heldout_elbo,
        trace.final_heldout_elbo(),
        trace.epochs.len()
    );
    Ok(trace.final_heldout_elbo().is_finite())
}

#[derive(Args, Debug)]
pub struct AgentArgs {
    #[arg(long)]
    pub env: String,
    /// AgentParams JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 200_000)]
    pub steps: usize,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr_critic: Option<f64>,
    #[arg(long)]
    pub lr_actor: Option<f64>,
    /// Planning period in steps; 0 turns planning off.
    #[arg(long)]
    pub plan_every: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write returns.svg.
    #[arg(long)]
    pub svg: bool,
}

pub fn agent(a: &AgentArgs) -> Result<bool> {
    let mdp = load_env(&a.env)?;
    let mut p: AgentParams = match &a.config {
        Some(path) => read_json(path)?,
        None => AgentParams::default(),
    };
    if let Some(v) = a.eta {
        p.eta = v;
    }
    if let Some(v) = a.tau {
        p.tau = v;
    }
    if let Some(v) = a.lr_critic {
        p.lr_critic = v;
    }
    if let Some(v) = a.lr_actor {
        p.lr_actor = v;
    }
    if let Some(v) = a.plan_every {
        p.plan_every = (v > 0).then_some(v);
    }
    p.validate()?;
    let mut ag = Agent::new(&mdp, p)?;
    let mut model = VariationalModel::for_mdp(&mdp);
    let out = run(&mut ag, &mdp, &mut model, a.steps, a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    let table = returns_table(&out);
    table.write_csv(&a.out.join("returns.csv"))?;
    model.save(a.out.join("checkpoint.json"))?;
    write_policy(&a.out.join("policy.json"), &out.final_policy)?;
    if a.svg {
        write_chart(&a.out.join("returns.svg"), &a.env, &table, &["eval_return_mean", "greedy_return_mean"])?;
    }
    log::info!("final return {:.4}, {} planning updates", out.final_return(), out.plan_updates);
    Ok(out.rows.iter().all(|r| r.eval_return_mean.is_finite()))
}

#[derive(Args, Debug)]
pub struct EnvArgs {
    /// Environment spec, e.g. `noisy_tv(8,3)`.
    pub spec: String,
    /// Destination file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn env(a: &EnvArgs) -> Result<bool> {
    let mdp = gio_core::envs::make(&a.spec)?;
    match &a.out {
        Some(p) => mdp.save(p)?,
        None => println!("{}", mdp.to_json()),
    }
    Ok(true)
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Run only these checks (repeatable).
    #[arg(long, value_enum)]
    pub only: Vec<Check>,
    /// Flip the sign of eta in the improvement step; the monotonicity check should then fail.
    #[arg(long)]
    pub inject_bug: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn verify(a: &VerifyArgs) -> Result<bool> {
    let report = run_verify(&a.only, a.inject_bug.then_some(Mutation::NegateEta))?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(p) = &a.out {
        std::fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{json}");
    for c in &report.checks {
        let verdict = if c.pass { "pass" } else { "FAIL" };
        log::info!("{verdict} {:?}: worst {:.3e}, margin {:.3e}", c.check, c.worst, c.margin);
    }
    Ok(report.pass)
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Environment specs to time; a default set when empty.
    #[arg(long = "env")]
    pub envs: Vec<String>,
    #[arg(long, default_value_t = 0.5)]
    pub eta: f64,
    #[arg(long)]
    pub future: Option<FutureKind>,
}

pub const BENCH_ENVS: [&str; 5] = ["chain(10)", "gridworld(5,0.1)", "random(20,4,3,0)", "noisy_tv(16,3)", "gridworld(8,0.1)"];

pub fn bench(a: &BenchArgs) -> Result<bool> {
    let envs: Vec<String> = if a.envs.is_empty() { BENCH_ENVS.iter().map(|s| s.to_string()).collect() } else { a.envs.clone() };
    let mut cfg = SolverConfig::with_eta(a.eta);
    if let Some(f) = a.future {
        cfg.future = f;
    }
    let mut t = csv::Writer::from_writer(std::io::stdout());
    t.write_record(["env", "states", "actions", "sweeps", "converged", "seconds"])?;
    let mut all = true;
    for spec in &envs {
        let mdp = load_env(spec)?;
        let start = Instant::now();
        let res = policy_iteration(&mdp, &PolicyTable::uniform(mdp.n_states(), mdp.n_actions()), &cfg)?;
        let secs = start.elapsed().as_secs_f64();
        all &= res.converged;
        t.write_record([
            spec.clone(),
            mdp.n_states().to_string(),
            mdp.n_actions().to_string(),
            res.sweeps().to_string(),
            res.converged.to_string(),
            format!("{secs:.4}"),
        ])?;
    }
    t.flush()?;
    Ok(all)
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Experiment config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run_config(a: &RunArgs) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    let rec = run_experiment(&cfg)?;
    log::info!("{} seeds written to {}", rec.runs.len(), cfg.output_dir.display());
    Ok(rec.all_converged())
}
