mod check;
mod config;
mod run;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "patchlab", version, about = "Train ERM, Cutout and CutMix on feature-noise patch data and check the theory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method of an experiment config.
    Run {
        config: PathBuf,
        /// Output directory (defaults to `[output] dir`, then `runs/<config stem>`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Validate the config and print derived quantities without training.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        no_plots: bool,
    },
    /// Print PASS/FAIL for each accuracy and convergence clause of a run directory.
    Check { dir: PathBuf },
}

fn apply_env(cfg: &mut ExperimentConfig) -> Result<()> {
    if let Ok(seed) = std::env::var("PATCHLAB_SEED") {
        cfg.data.seed = seed.trim().parse().with_context(|| format!("PATCHLAB_SEED=`{seed}` is not an integer"))?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            out,
            threads,
            dry_run,
            no_plots,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            apply_env(&mut cfg)?;
            if dry_run {
                print!("{}", run::describe(&cfg)?);
                return Ok(ExitCode::SUCCESS);
            }
            let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
            let out = out.or_else(|| cfg.output.dir.clone()).unwrap_or_else(|| PathBuf::from("runs").join(stem));
            let opts = run::RunOptions {
                out,
                threads,
                plots: cfg.output.plots && !no_plots,
            };
            run::run_experiment(&cfg, &opts)?;
            println!("wrote {}", opts.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { dir } => {
            let verdicts = check::check_dir(&dir)?;
            print!("{}", check::format_table(&verdicts));
            Ok(if verdicts.iter().all(|v| v.pass) { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
