use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use feel_cli::{cmd_compare, cmd_run, cmd_verify, MetricsFormat};

/// Simulator of federated edge learning over a wireless uplink with
/// hybrid analog/digital aggregation and digital baselines.
#[derive(Parser)]
#[command(name = "feel", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the configured experiment and write per-round metrics.
    Run {
        /// TOML configuration file.
        config: PathBuf,
        /// Output directory for manifest and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured round cap.
        #[arg(long)]
        max_rounds: Option<u64>,
        /// Emit JSON-lines metrics instead of CSV.
        #[arg(long)]
        jsonl: bool,
    },
    /// Run all three algorithms under a shared seed and summarize
    /// accuracy against consumed resource blocks.
    Compare {
        /// TOML configuration file.
        config: PathBuf,
        /// Output directory for manifest, combined metrics, summary.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured round cap.
        #[arg(long)]
        max_rounds: Option<u64>,
        /// Emit JSON-lines metrics instead of CSV.
        #[arg(long)]
        jsonl: bool,
    },
    /// Check one numerical subsystem against its independent oracle:
    /// lemma1 (compression error bound), matching (bottleneck
    /// assignment), waterfill (power allocation), oac (analog
    /// aggregation calibration), gradcheck (backpropagation).
    Verify {
        /// Suite: lemma1 | matching | waterfill | oac | gradcheck.
        suite: String,
        /// Seed for the oracle's random instances.
        #[arg(long, default_value_t = 0xFEE1)]
        seed: u64,
        /// Override the suite's default trial count.
        #[arg(long)]
        trials: Option<u64>,
    },
}

fn main() -> ExitCode {
    // FEEL_LOG controls verbosity (error|warn|info|debug|trace).
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEEL_LOG", "warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            max_rounds,
            jsonl,
        } => {
            let format = if jsonl {
                MetricsFormat::JsonLines
            } else {
                MetricsFormat::Csv
            };
            cmd_run(&config, &out, seed, max_rounds, format).map(|_| ())
        }
        Command::Compare {
            config,
            out,
            seed,
            max_rounds,
            jsonl,
        } => {
            let format = if jsonl {
                MetricsFormat::JsonLines
            } else {
                MetricsFormat::Csv
            };
            cmd_compare(&config, &out, seed, max_rounds, format).map(|_| ())
        }
        Command::Verify {
            suite,
            seed,
            trials,
        } => cmd_verify(&suite, seed, trials).map(|_| ()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
