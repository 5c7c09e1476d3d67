//! Experiment runner for the GBDSDE laboratory.
//!
//! Exit codes: 0 success, 2 config/validation error, 3 numerical failure.
//! All outputs are byte-identical across reruns and thread counts for a
//! fixed seed. Environment overrides (lower precedence than flags):
//! `GBDSDE_SEED`, `GBDSDE_THREADS`, `GBDSDE_OUT`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CmdError, RunContext};

#[derive(Parser)]
#[command(name = "gbdsde", version, about = "GBDSDE numerical laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Driver-generation self test: moments, mark frequencies, determinism.
    PathsSelftest,
    /// Per-path closed form of the linear equation.
    SolveLinear,
    /// Picard regression solver for the general equation.
    SolveGbdsde,
    /// Reflected jump-diffusion paths with boundary local time.
    Reflect,
    /// Solution field u(t,x) by forward resimulation.
    FeynmanKac,
    /// Deterministic finite-difference oracle for the integro-PDE.
    OraclePde,
    /// Necessary and sufficient maximum-principle checks of a control.
    ControlCheck,
    /// Mean-square identity check of the driver calculus.
    ItoCheck,
}

impl Command {
    fn run(&self, ctx: &RunContext) -> Result<(), CmdError> {
        match self {
            Command::PathsSelftest => commands::paths_selftest(ctx),
            Command::SolveLinear => commands::solve_linear_cmd(ctx),
            Command::SolveGbdsde => commands::solve_gbdsde_cmd(ctx),
            Command::Reflect => commands::reflect_cmd(ctx),
            Command::FeynmanKac => commands::feynman_kac_cmd(ctx),
            Command::OraclePde => commands::oracle_pde_cmd(ctx),
            Command::ControlCheck => commands::control_check_cmd(ctx),
            Command::ItoCheck => commands::ito_check_cmd(ctx),
        }
    }
}

fn env_u64(name: &str) -> Option<u64> {
    std::env::var(name).ok()?.parse().ok()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config_path = match cli.config {
        Some(p) => p,
        None => {
            eprintln!("validation error: --config <path> is required");
            return ExitCode::from(2);
        }
    };
    let config_bytes = match std::fs::read(&config_path) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("validation error: reading {}: {e}", config_path.display());
            return ExitCode::from(2);
        }
    };
    let text = match std::str::from_utf8(&config_bytes) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("validation error: config is not UTF-8: {e}");
            return ExitCode::from(2);
        }
    };
    let cfg = match config::load(text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("validation error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let seed = cli.seed.or_else(|| env_u64("GBDSDE_SEED")).unwrap_or(cfg.seed);
    let threads = cli
        .threads
        .or_else(|| env_u64("GBDSDE_THREADS").map(|v| v as usize))
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    let out_dir = cli
        .out
        .or_else(|| std::env::var("GBDSDE_OUT").ok().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("validation error: thread pool: {e}");
            return ExitCode::from(2);
        }
    };
    let ctx = RunContext {
        cfg: &cfg,
        config_bytes: &config_bytes,
        seed,
        out_dir: &out_dir,
    };
    match pool.install(|| cli.command.run(&ctx)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.message());
            ExitCode::from(e.code() as u8)
        }
    }
}
