use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use irtrack::commands;
use irtrack::config::{EvalConfig, RunConfig, Variant};
use irtrack::error::{CliError, Result};

/// Inverse-rendering 3D multi-object tracking on synthetic scenes.
#[derive(Parser)]
#[command(name = "irtrack", version)]
struct Cli {
    /// Worker threads; scenes run in parallel, frames within a scene in order.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Replaces the master seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample scenes, render frames and write corrupted detections.
    Generate(ConfigArg),
    /// Fit and track every generated scene.
    Track {
        #[command(flatten)]
        config: ConfigArg,
        /// Also write fitted objects drawn over the faded input frames.
        #[arg(long)]
        overlay: bool,
    },
    /// Score tracks against ground truth.
    Eval {
        /// Evaluate every scene of a run and write report.json / report.txt.
        #[arg(long, conflicts_with_all = ["tracks", "scene"])]
        config: Option<PathBuf>,
        /// Single track file, evaluated against --scene.
        #[arg(long, requires = "scene")]
        tracks: Option<PathBuf>,
        #[arg(long, requires = "tracks")]
        scene: Option<PathBuf>,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Compare fitting and matching variants on the configured scenes.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        /// Variant to run (repeatable); defaults to the config's list.
        #[arg(long = "variant")]
        variants: Vec<Variant>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let load = |p: &PathBuf| RunConfig::load(p, cli.seed);
    match cli.command {
        Command::Generate(c) => {
            for dir in commands::generate(&load(&c.config)?, cli.jobs)? {
                println!("{}", dir.display());
            }
        }
        Command::Track { config, overlay } => {
            for path in commands::track(&load(&config.config)?, overlay, cli.jobs)? {
                println!("{}", path.display());
            }
        }
        Command::Eval { config, tracks, scene, json } => {
            let report = match (config, tracks, scene) {
                (Some(c), _, _) => commands::eval(&load(&c)?)?,
                (None, Some(t), Some(s)) => commands::eval_files(&t, &s, &EvalConfig::default())?,
                _ => return Err(CliError::Config("eval needs --config or --tracks with --scene".into())),
            };
            print!("{}", if json { report.to_json() } else { report.to_table() });
        }
        Command::Ablate { config, variants } => {
            let cfg = load(&config.config)?;
            let variants = if variants.is_empty() { cfg.ablate.variants.clone() } else { variants };
            print!("{}", commands::ablate(&cfg, &variants, cli.jobs)?.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("IRTRACK_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("irtrack: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
