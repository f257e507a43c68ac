//! `export`: render one stored field as a grayscale PGM heatmap plus a CSV
//! of the raw values.

use crate::data::{parse_variable, read_dataset_checked, record_at};
use crate::heatmap::{export_heatmap, HeatmapError};
use crate::{echo_config, load_config_file, prepare_out_dir, CliError, CommonArgs};
use clap::Args;
use kbub_core::pipeline::transform_variables;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    pub dataset: PathBuf,
    pub trajectory: usize,
    /// Saved state index within the trajectory.
    pub state: usize,
    /// Transformed variable to render: rho, u1, u3, or theta.
    pub variable: String,
    /// Fixed [lo, hi] gray range; unset spans the field's own min/max.
    pub range: Option<(f64, f64)>,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig {
            dataset: PathBuf::from("runs/generate/dataset.kbub"),
            trajectory: 0,
            state: 0,
            variable: "theta".into(),
            range: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset file to read.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Trajectory index within the dataset.
    #[arg(long)]
    pub trajectory: Option<usize>,
    /// Saved state index.
    #[arg(long)]
    pub state: Option<usize>,
    /// Variable to render.
    #[arg(long)]
    pub variable: Option<String>,
    /// Fixed gray range as two values.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    pub range: Option<Vec<f64>>,
}

fn resolve_config(args: &ExportArgs) -> Result<ExportConfig, CliError> {
    let mut config: ExportConfig = match &args.common.config {
        Some(path) => load_config_file(path)?,
        None => ExportConfig::default(),
    };
    if let Some(dataset) = &args.dataset {
        config.dataset = dataset.clone();
    }
    if let Some(trajectory) = args.trajectory {
        config.trajectory = trajectory;
    }
    if let Some(state) = args.state {
        config.state = state;
    }
    if let Some(variable) = &args.variable {
        config.variable = variable.clone();
    }
    if let Some(range) = &args.range {
        config.range = Some((range[0], range[1]));
    }
    Ok(config)
}

pub fn cmd_export(args: ExportArgs) -> Result<(), CliError> {
    let config = resolve_config(&args)?;
    let variable = parse_variable(&config.variable)?;
    let out = prepare_out_dir(&args.common.out, "export")?;
    echo_config(&out, &config)?;

    let dataset = read_dataset_checked(&config.dataset)?;
    let record = record_at(&dataset, config.trajectory)?;
    let state = record.states.get(config.state).ok_or_else(|| {
        CliError::Config(format!(
            "state index {} out of range (trajectory {} has {} states)",
            config.state,
            config.trajectory,
            record.states.len()
        ))
    })?;
    let fields = transform_variables(state);
    let field = fields.field(variable);
    let stem = out.join(format!(
        "{}_traj{}_state{}",
        config.variable, config.trajectory, config.state
    ));
    export_heatmap(
        field.data(),
        dataset.nz as usize,
        dataset.nx as usize,
        config.range,
        &stem,
    )
    .map_err(|e| match e {
        HeatmapError::NonFinite(_) => CliError::Numerical(e.to_string()),
        HeatmapError::BadRange(..) => CliError::Config(e.to_string()),
        other => CliError::Data(other.to_string()),
    })?;

    eprintln!(
        "exported {} and {}",
        stem.with_extension("pgm").display(),
        stem.with_extension("csv").display()
    );
    Ok(())
}
