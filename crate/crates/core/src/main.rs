use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use uwb_tr::config::TrialConfig;
use uwb_tr::harness::{recompute_trial_metrics, run_monte_carlo, trial_dirs, CampaignOptions, HarnessError};

#[derive(Parser)]
#[command(name = "uwb-tr", version, about = "UWB teach-and-repeat simulation campaigns")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a Monte-Carlo campaign from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Master seed; trial i uses seed + i.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        /// Worker threads (0 = all cores).
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Recompute metrics from the trajectory CSVs of a trial or campaign directory.
    Metrics {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Cmd::Run { config, seed, trials, jobs, out } => {
            let config = TrialConfig::load(&config)?;
            let options = CampaignOptions { seed, trials, jobs, out: Some(out.clone()) };
            let summary = run_monte_carlo(&config, &options)?;
            println!("trials: {}, completed: {}", summary.trials, summary.completed);
            for (name, stats) in [("tracking", &summary.tracking_rmse), ("estimation", &summary.estimation_rmse)] {
                if let Some(b) = stats {
                    println!(
                        "{name} RMSE [m]: min {:.3}  median {:.3}  mean {:.3}  max {:.3}",
                        b.min, b.median, b.mean, b.max
                    );
                }
            }
            for f in &summary.failures {
                println!("trial {} failed in {}: {}", f.trial, f.stage, f.reason);
            }
            println!("artifacts written to {}", out.display());
        }
        Cmd::Metrics { dir } => {
            let dirs = trial_dirs(&dir)?;
            if dirs.is_empty() {
                return Err(HarnessError::Invalid(format!("no trial directories under {}", dir.display())));
            }
            println!("trial,tracking_rmse,estimation_rmse,max_position_error,max_heading_error");
            for d in dirs {
                let m = recompute_trial_metrics(&d)?;
                let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                println!("{name},{},{},{},{}", m.tracking_rmse, m.estimation_rmse, m.max_position_error, m.max_heading_error);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
