//! `stalesim` command-line harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stalesim_core::config::ExperimentConfig;
use stalesim_core::Error;

mod commands;

/// Environment variable naming the default output root.
const OUT_ENV: &str = "STALESIM_OUT";
const DEFAULT_OUT: &str = "stalesim-out";

#[derive(Parser)]
#[command(name = "stalesim", version, about = "Sensor staleness simulator and toy fusion detector experiments")]
struct Cli {
    /// TOML experiment configuration. Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Falls back to `output.dir`, then $STALESIM_OUT,
    /// then ./stalesim-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate scenes and sensor frames, plus a timing-only drive log.
    Generate,
    /// Build original and stale-augmented frame bundles and mix them.
    Augment,
    /// Train baseline and augmented detectors and evaluate them on synchronized, camera-stale and camera-dropout sets.
    Experiment,
    /// Train one detector per P_S and report normalized F1.
    SweepPs {
        /// Comma-separated P_S values; must include 0.
        #[arg(long, value_delimiter = ',')]
        ps: Option<Vec<f64>>,
    },
    /// Histogram T_C - T_L and T_R - T_L from a timing log.
    Profile {
        /// Timing log CSV. Defaults to timing_log.csv in the output directory.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Projection misalignment of LiDAR on a stale camera image.
    Misalign,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::SweepPs { ps: Some(ps) } = &cli.command {
        cfg.experiment.ps_sweep = ps.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let out = output_dir(cli, &cfg);
    let ctx = commands::Context::new(cfg, out)?;
    match &cli.command {
        Command::Generate => commands::generate(&ctx),
        Command::Augment => commands::augment(&ctx),
        Command::Experiment => commands::experiment(&ctx),
        Command::SweepPs { .. } => commands::sweep_ps(&ctx),
        Command::Profile { log } => commands::profile(&ctx, log.as_deref()),
        Command::Misalign => commands::misalign(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
