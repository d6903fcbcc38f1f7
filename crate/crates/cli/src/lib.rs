//! Command-line front end: bound verification, the bundled toy examples,
//! training runs with provenance, and long-format plot data.

pub mod config;
pub mod error;
pub mod plot;
pub mod provenance;
pub mod toy;
pub mod train;
pub mod verify;
pub mod workers;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use sailr_core::verify::SuiteConfig;

pub use config::ExperimentConfig;
pub use error::{CliError, Result, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(
    name = "sailr",
    version,
    about = "Safe RL with advantage-based intervention: verifier and experiment runner"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the performance and safety bounds on a random corpus or one instance.
    Verify {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Add the non-partial counterexample family (expected failures).
        #[arg(long)]
        include_appendix_b: bool,
        #[arg(long)]
        skip_fig2: bool,
        #[arg(long)]
        mdp: Option<PathBuf>,
        #[arg(long)]
        rule: Option<PathBuf>,
        /// Directory for verification_report.json.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print the surrogate MDP of a bundled example and its optimal policy.
    Toy {
        #[arg(value_enum)]
        example: toy::ToyExample,
        /// Surrogate reward on intervention.
        #[arg(long, allow_hyphen_values = true)]
        rtilde: Option<f64>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, default_value_t = 0)]
        chain: usize,
        /// Also write the report as JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every seed of an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Merge per-seed metrics CSVs into (metric, epoch, seed, value) rows.
    PlotData {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Verify {
            instances,
            seed,
            include_appendix_b,
            skip_fig2,
            mdp,
            rule,
            out,
        } => {
            let opts = verify::VerifyOptions {
                suite: SuiteConfig {
                    seed,
                    instances,
                    include_fig2: !skip_fig2,
                    include_appendix_b,
                    ..SuiteConfig::default()
                },
                mdp,
                rule,
                out,
                workers: workers::workers_from_env()?,
            };
            let outcome = verify::cmd_verify(&opts)?;
            println!("{}", outcome.summary_line());
            println!("report written to {}", outcome.report_path.display());
            Ok(outcome.exit_code())
        }
        Command::Toy {
            example,
            rtilde,
            eta,
            chain,
            out,
        } => {
            let report = toy::cmd_toy(&toy::ToyOptions {
                example,
                penalty: rtilde,
                eta,
                chain,
            })?;
            print!("{}", report.render());
            if let Some(path) = out {
                let text = serde_json::to_string_pretty(&report)? + "\n";
                std::fs::write(&path, text).map_err(error::io_err(&path))?;
            }
            Ok(EXIT_OK)
        }
        Command::Train { config, out, seed } => {
            let report = train::cmd_train(&train::TrainOptions {
                config,
                out,
                seed,
                workers: workers::workers_from_env()?,
            })?;
            let s = &report.summary;
            println!(
                "trained {} seeds x {} epochs: {} violations, {} interventions; output in {}",
                s.seeds.len(),
                s.epochs,
                s.total_violations,
                s.total_interventions,
                report.out_dir.display()
            );
            Ok(EXIT_OK)
        }
        Command::PlotData { dir, out } => {
            let r = plot::cmd_plot_data(&dir, out.as_deref())?;
            println!("{} rows from {} files written to {}", r.rows, r.files, r.out.display());
            Ok(EXIT_OK)
        }
    }
}

/// Runs a parsed command line and maps errors to exit codes.
pub fn run(cli: Cli) -> u8 {
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            e.exit_code()
        }
    }
}
