use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod serve;

/// Semi-autonomous attitude navigation of rigid-body networks.
#[derive(Debug, Parser)]
#[command(name = "rotnav", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario and write its trajectory CSV.
    Simulate {
        /// Scenario JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a trajectory CSV against the closed-loop invariants.
    Verify {
        #[arg(long)]
        traj: PathBuf,
        /// Same scenario without the autonomous law, for stealthiness.
        #[arg(long)]
        paired: Option<PathBuf>,
        /// Also require every trial to reach the heading objective.
        #[arg(long)]
        objective: bool,
        /// Write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Sweep the passivity index of an operator model.
    AnalyzePassivity {
        /// Operator model JSON, or an identification result.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-2)]
        omega_min: f64,
        #[arg(long, default_value_t = 1e2)]
        omega_max: f64,
        #[arg(long, default_value_t = 400)]
        points: usize,
    },
    /// Identify an operator model from a recorded session.
    Identify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resample rate in samples per second.
        #[arg(long, default_value_t = 10.0)]
        resample: f64,
        #[arg(long, default_value_t = 8)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep the dead time between a reference change and the start press.
        #[arg(long)]
        keep_dead_time: bool,
    },
    /// Run a live session server.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where the session log and trajectory are written on exit.
        #[arg(long)]
        record_dir: Option<PathBuf>,
        /// Address to bind.
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Run every scenario in a directory in parallel and verify each.
    Batch {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory; defaults to the config directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        objective: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out, seed } => commands::simulate(config.as_deref(), &out, seed),
        Command::Verify {
            traj,
            paired,
            objective,
            json,
        } => commands::verify(&traj, paired.as_deref(), objective, json.as_deref()),
        Command::AnalyzePassivity {
            model,
            out,
            omega_min,
            omega_max,
            points,
        } => commands::analyze_passivity(&model, &out, omega_min, omega_max, points),
        Command::Identify {
            input,
            out,
            resample,
            restarts,
            seed,
            keep_dead_time,
        } => commands::identify(&input, &out, resample, restarts, seed, !keep_dead_time),
        Command::Serve {
            port,
            config,
            record_dir,
            host,
        } => serve::run(&host, port, config.as_deref(), record_dir),
        Command::Batch {
            configs,
            jobs,
            out,
            objective,
        } => commands::batch(&configs, jobs, out.as_deref(), objective),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
