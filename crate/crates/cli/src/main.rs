use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gio_cli::commands::{self, AgentArgs, BenchArgs, EnvArgs, RunArgs, SolveArgs, TrainViArgs, VerifyArgs};

/// Information-seeking policy iteration on tabular MDPs.
#[derive(Parser)]
#[command(name = "gio", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Exact intrinsic policy iteration.
    Solve(SolveArgs),
    /// Fit the variational model to rollouts of a fixed policy.
    TrainVi(TrainViArgs),
    /// Run the sample-based agent.
    Agent(AgentArgs),
    /// Write an environment as MDP JSON.
    Env(EnvArgs),
    /// Run the property checks and print a JSON report.
    Verify(VerifyArgs),
    /// Time the solver on a set of environments.
    Bench(BenchArgs),
    /// Run a multi-seed experiment from a config file.
    Run(RunArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Solve(a) => commands::solve(a),
        Cmd::TrainVi(a) => commands::train_vi(a),
        Cmd::Agent(a) => commands::agent(a),
        Cmd::Env(a) => commands::env(a),
        Cmd::Verify(a) => commands::verify(a),
        Cmd::Bench(a) => commands::bench(a),
        Cmd::Run(a) => commands::run_config(a),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
