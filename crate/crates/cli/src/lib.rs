//! Command-line front end for the bubble-convection toolkit: dataset
//! generation, Koopman autoencoder training, evaluation, closed-loop
//! rollout, DMD analysis, and heatmap export.
//!
//! Every subcommand takes `--config <json>` plus a handful of override
//! flags, writes its outputs into `--out`, and echoes the fully resolved
//! configuration back into that directory so any run can be reproduced
//! from its own artifacts. Exit codes: 0 success, 2 configuration error,
//! 3 data error, 4 numerical failure.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

mod data;
mod dmd_cmd;
mod evaluate;
mod export;
mod generate;
pub mod heatmap;
mod rollout;
mod train;

pub use dmd_cmd::{DmdConfig, SpectrumReport};
pub use evaluate::{AggregateMetrics, EvaluateConfig, MetricsReport, SampleMetrics};
pub use export::ExportConfig;
pub use generate::{GenerateConfig, Storage};
pub use rollout::{RolloutConfig, RolloutReport, StepError};
pub use train::TrainConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

/// Built-in parameter presets: the published 100x100 configuration and a
/// small 32x32 one sized for a desktop CPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Debug, Parser)]
#[command(
    name = "kbub",
    version,
    about = "Thermal-bubble convection: dataset generation, Koopman autoencoder training, and DMD analysis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample bubble scenarios and generate a trajectory dataset.
    Generate(generate::GenerateArgs),
    /// Train the Koopman autoencoder on the transformed temperature field.
    Train(train::TrainArgs),
    /// Reconstruction and one-step-prediction metrics on the validation split.
    Evaluate(evaluate::EvaluateArgs),
    /// Closed-loop model rollout from a trajectory's initial state.
    Rollout(rollout::RolloutArgs),
    /// Dynamic mode decomposition of one stored trajectory.
    Dmd(dmd_cmd::DmdArgs),
    /// Export one stored field as a PGM heatmap plus CSV.
    Export(export::ExportArgs),
}

/// Flags shared by every subcommand; each overrides the matching config
/// file value.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON configuration file (flags override its values).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Parameter preset applied before other overrides.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(args) => generate::cmd_generate(args),
        Command::Train(args) => train::cmd_train(args),
        Command::Evaluate(args) => evaluate::cmd_evaluate(args),
        Command::Rollout(args) => rollout::cmd_rollout(args),
        Command::Dmd(args) => dmd_cmd::cmd_dmd(args),
        Command::Export(args) => export::cmd_export(args),
    }
}

/// Parses a JSON config file into `T`, classifying failures as config
/// errors. Unknown fields are rejected by the target types.
pub(crate) fn load_config_file<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}

/// Resolves the output directory (flag wins over `default`) and creates it.
pub(crate) fn prepare_out_dir(
    flag: &Option<PathBuf>,
    default_name: &str,
) -> Result<PathBuf, CliError> {
    let dir = flag
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(default_name));
    fs::create_dir_all(&dir).map_err(|e| {
        CliError::Data(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })?;
    Ok(dir)
}

/// Pretty JSON with a trailing newline; serialization order follows the
/// struct definition, so output bytes are stable across runs.
pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

/// Writes the resolved configuration echo that makes a run reproducible.
pub(crate) fn echo_config<T: Serialize>(out: &Path, config: &T) -> Result<(), CliError> {
    write_json(&out.join("config.json"), config)
}

/// Complex number as an explicit re/im pair for JSON reports.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ComplexPair {
    pub re: f64,
    pub im: f64,
}

impl ComplexPair {
    pub fn new(c: kbub_core::linalg::C64) -> ComplexPair {
        ComplexPair { re: c.re, im: c.im }
    }
}
