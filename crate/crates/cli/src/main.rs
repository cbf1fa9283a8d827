use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use neuroevo_cli::commands::{self, EvolveOutcome};
use neuroevo_cli::{Role, RunConfig};
use neuroevo_core::Arch;

/// Exit status of a worker the master refused (config digest mismatch).
const EXIT_REJECTED: u8 = 3;

#[derive(Parser)]
#[command(name = "neuroevo", version, about = "LSTM vibration forecasting with ant colony evolved connectivity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic flight corpus as CSV files.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of flights.
        #[arg(long, default_value_t = 30)]
        flights: usize,
        /// Flight length in seconds.
        #[arg(long, default_value_t = 600)]
        len: usize,
        /// Channels per flight, target included.
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank channels by cross-correlation with the target.
    Correlate {
        data_dir: PathBuf,
        #[arg(long, default_value = neuroevo_core::flightdata::DEFAULT_TARGET)]
        target: String,
        /// Ranking CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the fully connected network.
    Train(RunArgs),
    /// Score a saved model on a directory of flights.
    Evaluate {
        model: PathBuf,
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evolve gate connectivity with an ant colony.
    Evolve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "local")]
        role: Role,
        #[arg(long)]
        ants: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Rank an evolution log and summarize connection counts.
    Report {
        log: PathBuf,
        /// Rows to keep.
        #[arg(long, default_value_t = 30)]
        top: usize,
        /// Top-K CSV to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    arch: Option<Arch>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        if let Some(a) = self.arch {
            cfg.arch = a;
            cfg.window = None;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { seed, flights, len, channels, out } => {
            let paths = commands::cmd_synth(seed, flights, len, channels, &out)?;
            println!("wrote {} flights to {}", paths.len(), out.display());
        }
        Command::Correlate { data_dir, target, out } => {
            let ranking = commands::cmd_correlate(&data_dir, &target, &out)?;
            for (i, (name, score)) in ranking.entries.iter().enumerate() {
                println!("{:>3}  {name:<24} {score:.6}", i + 1);
            }
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            cfg.validate()?;
            let r = commands::cmd_train(&cfg)?;
            println!(
                "trained {} epochs in {:.1}s: train mse {:.6}, test mse {:.6}, test mae {:.6}",
                r.cost_history.len(),
                r.wall_time_s,
                r.final_train_mse,
                r.test_mse,
                r.test_mae
            );
        }
        Command::Evaluate { model, data_dir, out } => {
            let e = commands::cmd_evaluate(&model, &data_dir, &out)?;
            println!("mse {:.6}  mae {:.6}", e.mse, e.mae);
        }
        Command::Evolve { run, role, ants, iterations } => {
            let mut cfg = run.load()?;
            if let Some(a) = ants {
                cfg.ants = a;
            }
            if let Some(i) = iterations {
                cfg.iterations = i;
            }
            cfg.validate()?;
            match commands::cmd_evolve(&cfg, role)? {
                EvolveOutcome::Finished { best_fitness, best_mesh, evaluations } => println!(
                    "{evaluations} evaluations; best fitness {best_fitness:.6} with {} m1 edges; outputs in {}",
                    best_mesh.m1_count(),
                    cfg.out.display()
                ),
                EvolveOutcome::Worker { jobs } => println!("worker done after {jobs} jobs"),
            }
        }
        Command::Report { log, top, out } => {
            let (rows, stats) = commands::cmd_report(&log, top, out.as_deref()).context("building report")?;
            println!("{:>4}  {:>10}  {:>5}  {:>5}  {:>7}", "no", "fitness", "m1", "m2", "total");
            for r in &rows {
                println!("{:>4}  {:>10.6}  {:>5}  {:>5}  {:>7}", r.no, r.fitness, r.m1_connections, r.m2_connections, r.total_connections);
            }
            println!(
                "m1 edges {}..{} (mean {:.1}); connections {}..{} (mean {:.1})",
                stats.m1_min, stats.m1_max, stats.m1_mean, stats.total_min, stats.total_max, stats.total_mean
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NEUROEVO_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if commands::is_rejection(&e) {
                ExitCode::from(EXIT_REJECTED)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
