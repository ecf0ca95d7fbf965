use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eegnn::cli::{cmd_extract, cmd_run, cmd_sweep, cmd_synth, parse_config, SweepAxis};

/// Graph-neural-network classification over multi-channel feature data with
/// intra-/cross-subject splitting and leakage-audited validation protocols.
#[derive(Parser)]
#[command(name = "eegnn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured protocol; writes results.json, acc_matrix.csv and
    /// run_meta.json into the output directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override train.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for outer folds (results are identical regardless).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Re-run the config once per value of one hyper-parameter; writes
    /// sweep.csv plus one run directory per cell.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which field to vary: learning_rate | hidden_dim.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values, e.g. 0.0001,0.001,0.01.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Generate a synthetic dataset from a spec file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract band-filtered differential-entropy features from a raw
    /// recording directory (recording.json + signal.bin).
    Extract {
        #[arg(long)]
        recording: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        window_sec: f64,
        /// Smooth each feature series with the default linear dynamic system.
        #[arg(long, default_value_t = false)]
        smooth: bool,
        /// JSON file with a custom band list; defaults to the five bands.
        #[arg(long)]
        bands: Option<PathBuf>,
    },
}

fn run() -> eegnn::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            jobs,
        } => {
            let (cfg, warnings) = parse_config(&config)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            let output = cmd_run(&cfg, &out, seed, jobs.max(1))?;
            println!(
                "{:?} summary_accuracy = {:.4} -> {}",
                output.result.protocol,
                output.result.summary_accuracy,
                output.results_path.display()
            );
            Ok(())
        }
        Command::Sweep {
            config,
            out,
            axis,
            values,
            jobs,
        } => {
            let (cfg, warnings) = parse_config(&config)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            let (path, sweep_warnings) = cmd_sweep(&cfg, axis, &values, &out, jobs.max(1))?;
            for w in &sweep_warnings {
                eprintln!("warning: {w}");
            }
            println!("sweep written to {}", path.display());
            Ok(())
        }
        Command::Synth { spec, out } => {
            cmd_synth(&spec, &out)?;
            println!("dataset written to {}", out.display());
            Ok(())
        }
        Command::Extract {
            recording,
            out,
            window_sec,
            smooth,
            bands,
        } => {
            cmd_extract(&recording, &out, window_sec, smooth, bands.as_deref())?;
            println!("features written to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
