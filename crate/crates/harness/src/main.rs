use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pepper_harness::config::load_config;
use pepper_harness::matrix::{run_matrix, MatrixOptions};
use pepper_harness::record::record_fixtures;
use pepper_harness::report;

/// Backdoor-defense evaluation harness for text-to-image generation.
#[derive(Parser)]
#[command(name = "pepper", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the attack x defense x setting matrix from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run directory name under the configured runs_dir.
        #[arg(long, default_value = "run")]
        run_id: String,
        /// Concurrent cell workers (overrides the config).
        #[arg(long)]
        workers: Option<usize>,
        /// Continue an interrupted run, reusing cached cells and images.
        #[arg(long)]
        resume: bool,
        /// Comma-separated substrings; only matching cell ids execute.
        #[arg(long)]
        cells: Option<String>,
    },
    /// Re-render summary tables and plots from a finished run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Run live backends once and freeze their responses into replay
    /// fixture files (backend config key `record_to`).
    RecordFixtures {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "record")]
        run_id: String,
        /// Comma-separated substrings selecting the sample of cells.
        #[arg(long)]
        cells: Option<String>,
    },
    /// Validate a config file without running anything.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

const EXIT_OK: u8 = 0;
const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Run { config, run_id, workers, resume, cells } => {
            let loaded = match load_config(&config) {
                Ok(l) => l,
                Err(e) => {
                    eprintln!("config error: {e:#}");
                    return Ok(EXIT_CONFIG);
                }
            };
            let outcome = run_matrix(
                &loaded,
                MatrixOptions {
                    run_id,
                    resume,
                    cell_filter: cells,
                    workers_override: workers,
                    recorders: None,
                },
            )?;
            println!(
                "run {}: {} cell(s) executed, {} skipped, {} failed",
                outcome.run_dir.display(),
                outcome.executed,
                outcome.skipped,
                outcome.failed.len()
            );
            for cell in &outcome.failed {
                eprintln!("failed cell: {cell}");
            }
            Ok(if outcome.failed.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
        }
        Command::Report { run_dir } => {
            report::emit(&run_dir)?;
            println!("report written under {}", run_dir.display());
            Ok(EXIT_OK)
        }
        Command::RecordFixtures { config, run_id, cells } => {
            let loaded = match load_config(&config) {
                Ok(l) => l,
                Err(e) => {
                    eprintln!("config error: {e:#}");
                    return Ok(EXIT_CONFIG);
                }
            };
            let outcome = record_fixtures(&loaded, &run_id, cells)?;
            println!(
                "recorded fixtures via run {} ({} cells, {} failed)",
                outcome.run_dir.display(),
                outcome.executed,
                outcome.failed.len()
            );
            Ok(if outcome.failed.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
        }
        Command::ValidateConfig { config } => match load_config(&config) {
            Ok(loaded) => {
                let cells = pepper_harness::matrix::plan_cells(&loaded)?;
                println!(
                    "config ok: {} attack(s) x {} defense(s) x {} setting(s) = {} cells",
                    loaded.config.attacks.len(),
                    loaded.config.defenses.len(),
                    loaded.config.datasets.settings.len(),
                    cells.len()
                );
                Ok(EXIT_OK)
            }
            Err(e) => {
                eprintln!("config error: {e:#}");
                Ok(EXIT_CONFIG)
            }
        },
    }
}
