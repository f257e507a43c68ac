//! `dmd`: fit a dynamic mode decomposition to one stored trajectory and
//! export its spectrum plus leading-mode heatmaps.

use crate::data::{parse_variable, read_dataset_checked, record_at};
use crate::heatmap::{export_heatmap, HeatmapError};
use crate::{echo_config, load_config_file, prepare_out_dir, CliError, CommonArgs, ComplexPair};
use clap::Args;
use kbub_core::dmd::{build_snapshots, fit_dmd, reconstruction_residual, DmdError};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmdConfig {
    pub dataset: PathBuf,
    /// Which stored trajectory to decompose.
    pub trajectory: usize,
    /// Transformed variable to analyze: rho, u1, u3, or theta.
    pub variable: String,
    /// Truncation rank; unset keeps every numerically nonzero direction.
    pub rank: Option<usize>,
    /// Leading modes to export as heatmaps.
    pub modes: usize,
}

impl Default for DmdConfig {
    fn default() -> Self {
        DmdConfig {
            dataset: PathBuf::from("runs/generate/dataset.kbub"),
            trajectory: 0,
            variable: "theta".into(),
            rank: None,
            modes: 4,
        }
    }
}

#[derive(Debug, Args)]
pub struct DmdArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset file to analyze.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Trajectory index within the dataset.
    #[arg(long)]
    pub trajectory: Option<usize>,
    /// Variable to analyze.
    #[arg(long)]
    pub variable: Option<String>,
    /// Truncation rank.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Leading modes to export.
    #[arg(long)]
    pub modes: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub variable: String,
    pub trajectory: usize,
    pub n_snapshots: usize,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub eigenvalues: Vec<ComplexPair>,
    pub amplitudes: Vec<ComplexPair>,
    /// Frobenius mismatch of the rank-r reconstruction against X'.
    pub residual: f64,
}

fn resolve_config(args: &DmdArgs) -> Result<DmdConfig, CliError> {
    let mut config: DmdConfig = match &args.common.config {
        Some(path) => load_config_file(path)?,
        None => DmdConfig::default(),
    };
    if let Some(dataset) = &args.dataset {
        config.dataset = dataset.clone();
    }
    if let Some(trajectory) = args.trajectory {
        config.trajectory = trajectory;
    }
    if let Some(variable) = &args.variable {
        config.variable = variable.clone();
    }
    if let Some(rank) = args.rank {
        config.rank = Some(rank);
    }
    if let Some(modes) = args.modes {
        config.modes = modes;
    }
    Ok(config)
}

fn classify_dmd(e: DmdError) -> CliError {
    match e {
        DmdError::InvalidRank { .. } => CliError::Config(e.to_string()),
        DmdError::Linalg(inner) => CliError::Numerical(inner.to_string()),
        other => CliError::Data(other.to_string()),
    }
}

fn classify_heatmap(e: HeatmapError) -> CliError {
    match e {
        HeatmapError::NonFinite(_) => CliError::Numerical(e.to_string()),
        HeatmapError::BadRange(..) => CliError::Config(e.to_string()),
        other => CliError::Data(other.to_string()),
    }
}

pub fn cmd_dmd(args: DmdArgs) -> Result<(), CliError> {
    let config = resolve_config(&args)?;
    let variable = parse_variable(&config.variable)?;
    let out = prepare_out_dir(&args.common.out, "dmd")?;
    echo_config(&out, &config)?;

    let dataset = read_dataset_checked(&config.dataset)?;
    let record = record_at(&dataset, config.trajectory)?;
    let snapshots =
        build_snapshots(record, variable, &dataset.stats).map_err(classify_dmd)?;
    let fit = fit_dmd(&snapshots, config.rank).map_err(classify_dmd)?;
    let residual = reconstruction_residual(&fit, &snapshots).map_err(classify_dmd)?;

    let report = SpectrumReport {
        variable: config.variable.clone(),
        trajectory: config.trajectory,
        n_snapshots: record.states.len(),
        rank: fit.rank,
        singular_values: fit.singular_values.iter().copied().collect(),
        eigenvalues: fit.eigenvalues.iter().map(|&c| ComplexPair::new(c)).collect(),
        amplitudes: fit.amplitudes.iter().map(|&c| ComplexPair::new(c)).collect(),
        residual,
    };
    crate::write_json(&out.join("spectrum.json"), &report)?;

    let (nz, nx) = (dataset.nz as usize, dataset.nx as usize);
    let n_export = config.modes.min(fit.rank);
    for k in 0..n_export {
        let column = fit.modes.column(k);
        let re: Vec<f64> = column.iter().map(|c| c.re).collect();
        let im: Vec<f64> = column.iter().map(|c| c.im).collect();
        export_heatmap(&re, nz, nx, None, &out.join(format!("mode{k}_re")))
            .map_err(classify_heatmap)?;
        export_heatmap(&im, nz, nx, None, &out.join(format!("mode{k}_im")))
            .map_err(classify_heatmap)?;
    }

    eprintln!(
        "dmd rank {} on trajectory {} ({}): residual {:.3e}, {} modes exported",
        fit.rank, config.trajectory, config.variable, residual, n_export
    );
    Ok(())
}
