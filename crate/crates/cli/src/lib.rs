//! Command-line harness: builds a workspace stage by stage and writes every
//! result as a CSV tagged with the configuration hash.

pub mod commands;
pub mod config;
pub mod error;
pub mod verify;
pub mod workspace;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::Ctx;
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::workspace::{unix_now, world_hash, Workspace};

#[derive(Debug, Parser)]
#[command(name = "reconbench", version, about = "Attacks and defenses for reconstruction-based detectors on toy diffusion worlds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON experiment configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Workspace directory.
    #[arg(long, global = true, default_value = "reconbench-out")]
    pub out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Build the real mixture and train or derive every generator.
    TrainScore,
    /// Sample labeled train/val/test splits for each generator.
    GenData,
    /// Train the shared autoencoder on real training data.
    TrainAe,
    /// Train one detector per (kind, generator).
    TrainDetector,
    /// White-box attack every detector; also the random-noise baseline.
    Attack,
    /// Cross-detector transfer matrix.
    Transfer,
    /// Diffusion purification sweep on benign and attacked inputs.
    Purify,
    /// Grid-searched adversarial training of DIRE and LaRE² heads.
    Advtrain,
    /// Feature-shift ratios under attack, transfer and noise.
    AnalyzeRho,
    /// Fraction of uniform-noise inputs labeled Real.
    Collapse,
    /// Numerical oracles and invariant scans over the workspace.
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainScore => "train-score",
            Command::GenData => "gen-data",
            Command::TrainAe => "train-ae",
            Command::TrainDetector => "train-detector",
            Command::Attack => "attack",
            Command::Transfer => "transfer",
            Command::Purify => "purify",
            Command::Advtrain => "advtrain",
            Command::AnalyzeRho => "analyze-rho",
            Command::Collapse => "collapse",
            Command::Verify => "verify",
        }
    }
}

fn set_workers(n: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Config("--workers must be >= 1".into()));
        }
        // A second call in one process keeps the first pool; results do not
        // depend on the worker count.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    set_workers(cli.workers)?;
    if cli.command == Command::Verify {
        return verify::run(&cli.out).map(|_| ());
    }
    let config = ExperimentConfig::load(cli.config.as_deref())?.resolve(cli.seed)?;
    let hash = config.hash();
    let ctx = Ctx {
        ws: Workspace::new(&cli.out),
        world: world_hash(&config.world),
        hash: hash.clone(),
        config,
    };
    let pretty = serde_json::to_string_pretty(&ctx.config).map_err(|e| CliError::Config(e.to_string()))?;
    ctx.ws.save_config(&pretty, &hash)?;
    let started = unix_now();
    let metrics = match cli.command {
        Command::TrainScore => commands::train_score(&ctx),
        Command::GenData => commands::gen_data(&ctx),
        Command::TrainAe => commands::train_ae(&ctx),
        Command::TrainDetector => commands::train_detector(&ctx),
        Command::Attack => commands::attack(&ctx),
        Command::Transfer => commands::transfer(&ctx),
        Command::Purify => commands::purify(&ctx),
        Command::Advtrain => commands::advtrain(&ctx),
        Command::AnalyzeRho => commands::analyze_rho(&ctx),
        Command::Collapse => commands::collapse(&ctx),
        Command::Verify => unreachable!(),
    }?;
    ctx.ws.write_record(cli.command.name(), &hash, started, metrics)?;
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
