//! Command-line pipeline: synthesize a cohort, preprocess it, cross-validate
//! the network, run the variant ablation and render saliency overlays.

pub mod commands;
pub mod config;
pub mod outputs;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use sclera_core::autonn::NnError;
use sclera_core::imgproc::ImgError;
use sclera_core::model::ModelError;
use sclera_core::mrfo::MrfoError;
use sclera_core::saliency::SaliencyError;
use sclera_core::synthcohort::SynthError;

pub use commands::{cmd_ablate, cmd_preprocess, cmd_saliency, cmd_synth, cmd_train_eval};
pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("leakage detected: {0}")]
    Leakage(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Leakage(_) => 4,
            CliError::NonFinite(_) => 5,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ImgError> for CliError {
    fn from(e: ImgError) -> Self {
        match e {
            ImgError::InvalidParam(m) => CliError::Config(m),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidParam(m) => CliError::Config(m),
            SynthError::Image(e) => e.into(),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Io(_) | NnError::MalformedCheckpoint(_) => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::LeakageDetected { .. } => CliError::Leakage(e.to_string()),
            ModelError::NonFiniteLoss { .. } => CliError::NonFinite(e.to_string()),
            ModelError::Io(e) => e.into(),
            ModelError::Image(e) => e.into(),
            ModelError::Synth(e) => e.into(),
            ModelError::Nn(e) => e.into(),
            ModelError::Mrfo(MrfoError::NonFiniteFitness(_) | MrfoError::NonFiniteFeatures) => CliError::NonFinite(e.to_string()),
            ModelError::Mrfo(MrfoError::Io(e)) => e.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<SaliencyError> for CliError {
    fn from(e: SaliencyError) -> Self {
        match e {
            SaliencyError::Model(e) => e.into(),
            SaliencyError::Image(e) => e.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<sclera_core::evalkit::EvalError> for CliError {
    fn from(e: sclera_core::evalkit::EvalError) -> Self {
        CliError::Config(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "sclera", version, about = "Scleral-vessel glucose estimation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (flat `key = value` TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WithInput {
    #[command(flatten)]
    pub common: Common,
    /// Directory produced by the previous stage.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic cohort: images, manifest.csv, truth.csv.
    Synth(Common),
    /// ROI crop, normalization, CLAHE and vesselness for every image.
    Preprocess(WithInput),
    /// Grouped cross-validation with per-fold feature selection.
    TrainEval(WithInput),
    /// Cross-validate all four model variants on shared folds.
    Ablate(WithInput),
    /// Grad-CAM and Grad-CAM++ overlays for selected participants.
    Saliency {
        #[command(flatten)]
        args: WithInput,
        /// A `train-eval` output directory (each participant uses the model
        /// of the fold that held it out) or a checkpoint path without extension.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated ids; overrides `participants` in the config.
        #[arg(long, value_delimiter = ',')]
        participants: Vec<String>,
    },
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = RunConfig::load(&c.config)?;
            cmd_synth(&cfg, &c.out).map(drop)
        }
        Command::Preprocess(a) => {
            let cfg = RunConfig::load(&a.common.config)?;
            cmd_preprocess(&cfg, &a.input, &a.common.out).map(drop)
        }
        Command::TrainEval(a) => {
            let cfg = RunConfig::load(&a.common.config)?;
            cmd_train_eval(&cfg, &a.input, &a.common.out).map(drop)
        }
        Command::Ablate(a) => {
            let cfg = RunConfig::load(&a.common.config)?;
            cmd_ablate(&cfg, &a.input, &a.common.out).map(drop)
        }
        Command::Saliency { args, checkpoint, participants } => {
            let cfg = RunConfig::load(&args.common.config)?;
            let ids = if participants.is_empty() { cfg.participants.clone() } else { participants };
            cmd_saliency(&cfg, &args.input, &checkpoint, &ids, &args.common.out).map(drop)
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
