//! Command-line front end: run experiments, sweep the penalty weight, run
//! the built-in verification suite, or export a partition manifest.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cwfed::config::parse_config;
use cwfed::experiment::{
    build_partition, config_hash, lambda_sweep, load_dataset, resolve_output_dir, run_experiment,
};
use cwfed::metrics;

#[derive(Parser)]
#[command(
    name = "cwfed",
    about = "Deterministic desk-scale simulator for class-wise federated averaging",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a TOML config file.
    Run { config: PathBuf },
    /// Run the experiment once per penalty weight (same seed) and write
    /// lambda_sweep.csv.
    SweepLambda {
        config: PathBuf,
        /// Penalty weights to sweep, e.g. --lambdas 0,0.1,1,10
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        lambdas: Vec<f64>,
    },
    /// Run the built-in invariant suite (gradient checks, aggregation
    /// oracles, uniform-distribution equivalence).
    Verify,
    /// Partition the dataset and write data_distribution.csv without training.
    ExportPartition { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config } => {
            let cfg = parse_config(&config)?;
            let summary = run_experiment(&cfg)?;
            println!(
                "best mean accuracy {:.4} at trace position {} ({} rounds)",
                summary.best_mean_accuracy,
                summary.best_round,
                summary.trace.len()
            );
            println!(
                "final mean distance to true distributions {:.4}",
                summary.final_mean_omega
            );
            println!("config hash {}", summary.config_hash);
            println!("artifacts in {}", summary.output_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::SweepLambda { config, lambdas } => {
            let cfg = parse_config(&config)?;
            let rows = lambda_sweep(&cfg, &lambdas)?;
            println!("lambda  best_mean_accuracy  mean_final_omega");
            for row in &rows {
                println!(
                    "{:<7} {:<19.4} {:.4}",
                    row.lambda, row.best_mean_accuracy, row.mean_final_omega
                );
            }
            let root = resolve_output_dir(&cfg, &config_hash(&cfg));
            println!(
                "table written to {}",
                root.join("lambda_sweep.csv").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify => {
            let results = cwfed::verify::run_verification();
            let mut all_passed = true;
            for result in &results {
                let tag = if result.passed { "ok  " } else { "FAIL" };
                println!("{tag} {} ({})", result.name, result.detail);
                all_passed &= result.passed;
            }
            if all_passed {
                println!("{} checks passed", results.len());
                Ok(ExitCode::SUCCESS)
            } else {
                anyhow::bail!("verification failed");
            }
        }
        Command::ExportPartition { config } => {
            let cfg = parse_config(&config)?;
            let dataset = load_dataset(&cfg)?;
            let partition = build_partition(&cfg, &dataset)?;
            let out_dir = resolve_output_dir(&cfg, &config_hash(&cfg));
            std::fs::create_dir_all(&out_dir)?;
            let path = out_dir.join("data_distribution.csv");
            metrics::write_data_distribution(&path, &partition.clients)?;
            let truncated: usize = partition.truncated_per_class.iter().sum();
            if truncated > 0 {
                println!(
                    "note: {truncated} samples dropped by equal-shard truncation {:?}",
                    partition.truncated_per_class
                );
            }
            println!("partition manifest written to {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
