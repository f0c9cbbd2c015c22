//! Command-line front end: config loading with flag overrides, corpus
//! ingestion, and the build-kb / train / eval / diagnose subcommands.
//! Every run is reproducible: (config, seed) determines all outputs
//! byte for byte.

pub mod commands;
pub mod config;
pub mod fsio;

use clap::{Parser, Subcommand};
use config::ExperimentConfig;
use std::path::PathBuf;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or invalid configuration: exit code 1.
    Config(String),
    /// Failures while running a valid configuration: exit code 2.
    Runtime(String),
    /// A self-test diagnostic found a violated property: exit code 3.
    CheckFailed(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<ask_core::Error> for CliError {
    fn from(e: ask_core::Error) -> Self {
        match e {
            ask_core::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub fn exit_code(err: &CliError) -> i32 {
    match err {
        CliError::Config(_) => 1,
        CliError::Runtime(_) => 2,
        CliError::CheckFailed(_) => 3,
    }
}

#[derive(Parser, Debug)]
#[command(name = "ask", about = "Knowledge-enhanced contrastive retrieval experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; every random stream derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Loss variant: baseline or ask.
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Diagnostic mode: rdm, obi, or bound.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Encoder weights for evaluation.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Corpus split for evaluation: train or eval.
    #[arg(long, global = true)]
    pub split: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum CliCommand {
    /// Build and export the knowledge-base snapshot.
    BuildKb,
    /// Run the training loop and write report, metrics, and weights.
    Train,
    /// Evaluate recall of stored encoder weights on a corpus split.
    Eval,
    /// Drift, out-of-batch-influence, or deviation-bound diagnostics.
    Diagnose,
}

/// Load the config file (if any) and fold the flag overrides into it;
/// precedence is flags > file > defaults.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg: ExperimentConfig = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.display().to_string();
    }
    if let Some(variant) = &cli.variant {
        cfg.train.loss_variant = match variant.as_str() {
            "baseline" => ask_core::LossVariant::Baseline,
            "ask" => ask_core::LossVariant::Ask,
            other => return Err(CliError::Config(format!("unknown variant '{other}'"))),
        };
    }
    if let Some(mode) = &cli.mode {
        if !matches!(mode.as_str(), "rdm" | "obi" | "bound") {
            return Err(CliError::Config(format!("unknown mode '{mode}'")));
        }
        cfg.diagnose.mode = mode.clone();
    }
    if let Some(weights) = &cli.weights {
        cfg.eval.weights_path = Some(weights.display().to_string());
    }
    if let Some(split) = &cli.split {
        if !matches!(split.as_str(), "train" | "eval") {
            return Err(CliError::Config(format!("unknown split '{split}'")));
        }
        cfg.eval.split = split.clone();
    }
    Ok(cfg)
}

pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    let cfg = resolve_config(&cli)?;
    match cli.command {
        CliCommand::BuildKb => commands::cmd_build_kb(&cfg),
        CliCommand::Train => commands::cmd_train(&cfg),
        CliCommand::Eval => commands::cmd_eval(&cfg),
        CliCommand::Diagnose => commands::cmd_diagnose(&cfg),
    }
}
