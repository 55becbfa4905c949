//! Command-line front end: train, evaluate, corrupt, and export analysis
//! artifacts from one binary. All randomness flows from the config seed,
//! so identical invocations produce identical outputs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use p2be_core::training::EncoderKind;
use p2be_core::Error;

use commands::EvalFlags;

#[derive(Parser)]
#[command(
    name = "p2be",
    version,
    about = "Train and stress-test small CNNs on binary pixel embeddings",
    long_about = "Replaces RGB inputs with binary per-pixel codes (one-hot, thermometer, \
                  or a learned table), trains a small CNN on them, and measures robustness \
                  against a discrete-input attack and visual corruptions.\n\n\
                  Every run is driven by one JSON config; `p2be defaults` writes the full \
                  document with all default values filled in."
)]
struct Cli {
    /// Upper bound on worker threads (>= 1; computation is deterministic
    /// regardless of the value)
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.bin and metrics.csv to the out dir
    Train {
        /// Run config JSON (see `p2be defaults` for the schema)
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's training seed
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: clean error plus optional corruption/attack tables
    Eval {
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config for data, attack, and ladder settings (defaults when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Measure every corruption kind at severities 1-5
        #[arg(long)]
        corruptions: bool,
        /// Baseline `kind,severity,error` CSV; adds the CE table and mCE
        #[arg(long, requires = "corruptions")]
        baseline_csv: Option<PathBuf>,
        /// Measure error under the discrete-input attack
        #[arg(long)]
        attack: bool,
        /// Overrides the attack budget epsilon in [0,1] units
        #[arg(long, requires = "attack")]
        epsilon: Option<f32>,
    },
    /// Write a codebook's 256x256 cosine-similarity matrix as PGM and CSV
    ExportSim {
        /// Checkpoint whose codebook is exported
        #[arg(long, conflicts_with_all = ["encoder", "m"])]
        checkpoint: Option<PathBuf>,
        /// Hand-coded encoder to export instead: one-hot or thermometer
        #[arg(long)]
        encoder: Option<String>,
        /// Code length for --encoder
        #[arg(long, default_value_t = 64, requires = "encoder")]
        m: usize,
        /// Output path prefix; writes <prefix>.pgm and <prefix>.csv
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply one corruption to a binary PPM image
    Corrupt {
        /// Input image (P6 PPM)
        #[arg(long)]
        input: PathBuf,
        /// Corruption kind, e.g. gaussian-noise
        #[arg(long)]
        kind: String,
        /// Severity 1-5
        #[arg(long)]
        severity: u8,
        /// Seed for the noise kinds (deterministic kinds ignore it)
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output PPM path
        #[arg(long)]
        output: PathBuf,
        /// Run config supplying custom severity ladders
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the full run config with every default filled in
    Defaults {
        /// Output path
        #[arg(long, default_value = "defaults.json")]
        output: PathBuf,
    },
}

fn run(cli: Cli) -> p2be_core::Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    match cli.command {
        Command::Train { config, seed, out_dir } => commands::cmd_train(&config, seed, out_dir),
        Command::Eval {
            checkpoint,
            config,
            corruptions,
            baseline_csv,
            attack,
            epsilon,
        } => commands::cmd_eval(
            &checkpoint,
            config.as_deref(),
            &EvalFlags { corruptions, baseline_csv, attack, epsilon },
        ),
        Command::ExportSim { checkpoint, encoder, m, out } => {
            let encoder = encoder.map(|e| e.parse::<EncoderKind>()).transpose()?;
            commands::cmd_export_sim(checkpoint.as_deref(), encoder, m, &out)
        }
        Command::Corrupt { input, kind, severity, seed, output, config } => {
            commands::cmd_corrupt(&input, &kind, severity, seed, &output, config.as_deref())
        }
        Command::Defaults { output } => commands::cmd_defaults(&output),
    }
}

/// Usage and caller-input problems exit 2; failures while doing otherwise
/// valid work exit 1.
fn exit_for(error: &Error) -> u8 {
    match error {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::UnknownCorruption(_)
        | Error::EncoderMismatch { .. }
        | Error::IncompleteErrorTable { .. }
        | Error::ZeroBaseline(_)
        | Error::EmptyErrorTable
        | Error::LabelOutOfRange { .. }
        | Error::ImageFormat(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(exit_for(&error))
        }
    }
}
