use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lulc_cli::{parse_override, run_all, run_stage, CliError, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "lulc", version, about = "Land-cover segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Re-run even when the stage manifest is current.
    #[arg(long, global = true)]
    force: bool,
    /// Seed for the synthetic scene and for training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override a config entry, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic scene, LUT and vectors.
    Synth,
    /// DN to surface reflectance.
    Ac,
    /// Burn vectors and NDVI into label rasters.
    Rasterize,
    /// Cut training tiles and the evaluation grid.
    Chip,
    /// Fit the model heads on the training chips.
    Train,
    /// Per-patch class probabilities.
    Predict,
    /// Stitch patch probabilities into one raster.
    Merge,
    /// Recall and IoU against the truth raster.
    Eval,
    /// Class area change against a baseline.
    Change,
    /// Every stage in order.
    Run,
}

fn stage_of(c: Command) -> Option<Stage> {
    Some(match c {
        Command::Synth => Stage::Synth,
        Command::Ac => Stage::Ac,
        Command::Rasterize => Stage::Rasterize,
        Command::Chip => Stage::Chip,
        Command::Train => Stage::Train,
        Command::Predict => Stage::Predict,
        Command::Merge => Stage::Merge,
        Command::Eval => Stage::Eval,
        Command::Change => Stage::Change,
        Command::Run => return None,
    })
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .clone()
        .ok_or_else(|| CliError::Precondition("--config <path> is required".into()))?;
    let mut overrides = cli
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.into()));
    }
    let cfg = PipelineConfig::load(&path, &overrides)?;
    match stage_of(cli.command) {
        Some(stage) => {
            run_stage(&cfg, stage, cli.force)?;
        }
        None => {
            run_all(&cfg, cli.force)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
