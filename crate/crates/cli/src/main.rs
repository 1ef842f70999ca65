use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use winq_cli::commands::{cmd_compare, cmd_spectrum, cmd_sweep, cmd_train};
use winq_cli::error::{CliError, Result};
use winq_cli::verify::{run_verify, Faults};

#[derive(Parser)]
#[command(name = "winq", version, about = "Quantization-aware training with grid re-initialization, and curvature tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics, checkpoints and a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Replace every seed in the config.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Estimate the Hessian spectral density at a checkpoint.
    Spectrum {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Near-zero threshold for the mass statistics.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Spectrum statistics along the interpolation toward the grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated interpolation weights in [0, 1].
        #[arg(long)]
        alphas: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Steps-to-target of a baseline run against a re-initializing run.
    Compare {
        /// Give twice: the baseline config, then the re-initializing one.
        #[arg(long, num_args = 1, required = true)]
        config: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        target_loss: Option<f64>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Run the built-in correctness checks.
    Verify {
        /// Write the JSON report here as well.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, hide = true)]
        fault_half_away_rounding: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out_dir, seed_override } => {
            let r = cmd_train(&config, &out_dir, seed_override)?;
            println!("{}", serde_json::to_string_pretty(&r.manifest.summary).expect("summary serializes"));
        }
        Command::Spectrum { config, checkpoint, out_dir, tau, seed_override } => {
            let r = cmd_spectrum(&config, &checkpoint, &out_dir, tau, seed_override)?;
            print!("{}", r.record.to_text());
        }
        Command::Sweep { config, checkpoint, out_dir, alphas, tau, seed_override } => {
            let r = cmd_sweep(&config, &checkpoint, &out_dir, alphas.as_deref(), tau, seed_override)?;
            print!("{}", r.result.to_csv());
        }
        Command::Compare { config, out_dir, target_loss, seed_override } => {
            let [baseline, winq] = config.as_slice() else {
                return Err(CliError::Usage(format!("compare needs exactly two --config values, got {}", config.len())));
            };
            let r = cmd_compare(baseline, winq, &out_dir, target_loss, seed_override)?;
            println!("{}", serde_json::to_string_pretty(&r.record).expect("record serializes"));
        }
        Command::Verify { out_dir, fault_half_away_rounding } => {
            let report = run_verify(Faults { half_away_rounding: fault_half_away_rounding });
            print!("{}", report.to_text());
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
                let p = dir.join("verify.json");
                std::fs::write(&p, serde_json::to_string_pretty(&report).expect("report serializes")).map_err(|e| CliError::io(&p, e))?;
            }
            if !report.passed {
                return Err(CliError::VerifyFailed { failed: report.failed() });
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
