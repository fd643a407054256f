use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use qls_core::config::RunConfig;
use qls_core::workflow;
use qls_core::{Error, Result};

/// Measurement-driven state preparation of trapped molecular ions.
#[derive(Debug, Parser)]
#[command(name = "qlsprep", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Replace the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for pulse compilation and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Replace the configured output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compile every pulse into a transition-matrix archive.
    BuildTm,
    /// Train the deep-Q agent on the archived environment.
    Train {
        /// Continue from the last scheduled checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Greedy roll-outs of the trained network.
    Evaluate,
    /// Roll-outs of the sweeping policy.
    Baseline,
    /// Extract the greedy policy as a decision tree.
    Tree,
    /// Summarise evaluations into report.md and SVG plots.
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::config("--config is required"))?;
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_env_overrides();
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::data(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(Error::config("--jobs must be at least 1"));
    }
    let cfg = load_config(cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
        .map_err(|e| Error::config(e.to_string()))?;
    match cli.command {
        Command::BuildTm => print_json(&workflow::cmd_build_tm(&cfg)?),
        Command::Train { resume } => print_json(&workflow::cmd_train(&cfg, resume)?),
        Command::Evaluate => print_json(&workflow::cmd_evaluate(&cfg)?),
        Command::Baseline => print_json(&workflow::cmd_baseline(&cfg)?),
        Command::Tree => print_json(&workflow::cmd_tree(&cfg)?.1),
        Command::Report => {
            print!("{}", workflow::cmd_report(&cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
