//! Command-line pipeline: data synthesis, training, generation, separation
//! and evaluation.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(Debug, Parser)]
#[command(name = "langsep", version, about = "Source separation with noise-conditioned autoregressive subband models")]
pub struct Cli {
    /// TOML job file for the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the job file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Floating-point width of model parameters and arithmetic.
    #[arg(long, global = true, value_enum, default_value = "64")]
    pub precision: Precision,
    /// Output directory.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true, env = "LANGSEP_THREADS")]
    pub threads: Option<usize>,
    /// Print the resolved job configuration as TOML and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic WAV items and a manifest with split assignments.
    SynthData {
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seconds: Option<f64>,
    },
    /// Train a source model and write checkpoints and a training log.
    Train,
    /// Sample audio from a trained model.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seconds: Option<f64>,
        /// Noise level the model is conditioned on.
        #[arg(long, allow_hyphen_values = true)]
        sigma_db: Option<f64>,
    },
    /// Separate mixtures with one model per source.
    Separate {
        #[arg(long)]
        mix: Option<PathBuf>,
        /// Checkpoint per source, in mixing-weight order.
        #[arg(long = "model")]
        models: Vec<PathBuf>,
    },
    /// Score separated outputs against references.
    Evaluate {
        #[arg(long)]
        outputs: Option<PathBuf>,
        #[arg(long)]
        refs: Option<PathBuf>,
        #[arg(long)]
        mixes: Option<PathBuf>,
    },
}

/// Exit status for rejected configuration or usage.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FAILURE: i32 = 1;

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        // Only the first call in a process can size the global pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match &cli.command {
        Command::SynthData { class, count, seconds } => commands::synth_data(cli, class.as_deref(), *count, *seconds),
        Command::Train => commands::train(cli),
        Command::Generate { checkpoint, seconds, sigma_db } => commands::generate(cli, checkpoint.clone(), *seconds, *sigma_db),
        Command::Separate { mix, models } => commands::separate(cli, mix.clone(), models),
        Command::Evaluate { outputs, refs, mixes } => commands::evaluate(cli, outputs.clone(), refs.clone(), mixes.clone()),
    }
}

/// One-line JSON description of a failure, and the exit status for it.
pub fn describe_error(err: &anyhow::Error) -> (String, i32) {
    let (kind, code, problems) = match err.downcast_ref::<config::ConfigError>() {
        Some(c) => ("config", EXIT_CONFIG, c.0.clone()),
        None => ("runtime", EXIT_FAILURE, err.chain().skip(1).map(|e| e.to_string()).collect()),
    };
    let body = serde_json::json!({ "error": kind, "message": err.to_string(), "details": problems });
    (body.to_string(), code)
}
