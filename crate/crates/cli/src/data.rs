//! Shared dataset and model plumbing: reading datasets, turning stored
//! states into normalized temperature trajectories, and loading checkpoints
//! with error classification.

use crate::CliError;
use kbub_core::dataset::{read_dataset, Dataset};
use kbub_core::koopman::{AEConfig, KoopmanAE, KoopmanError, Trajectory};
use kbub_core::pipeline::{normalize, transform_variables, Variable};
use kbub_core::scenario::TrajectoryRecord;
use kbub_core::tensor::Tensor;
use std::path::Path;

pub(crate) fn read_dataset_checked(path: &Path) -> Result<Dataset, CliError> {
    read_dataset(path).map_err(|e| CliError::Data(format!("dataset {}: {e}", path.display())))
}

/// The model's input plane must match the stored grid exactly.
pub(crate) fn check_model_grid(ae: &AEConfig, dataset: &Dataset) -> Result<(), CliError> {
    if ae.input_h != dataset.nz as usize || ae.input_w != dataset.nx as usize {
        return Err(CliError::Config(format!(
            "model expects {}x{} inputs but the dataset grid is {}x{} (nz x nx); \
             pick the matching preset or override input_h/input_w",
            ae.input_h, ae.input_w, dataset.nz, dataset.nx
        )));
    }
    Ok(())
}

/// Normalized transformed-temperature states of one record, flattened
/// row-major, in time order. This is the single variable the model sees.
pub(crate) fn theta_trajectory(dataset: &Dataset, record: &TrajectoryRecord) -> Trajectory {
    record
        .states
        .iter()
        .map(|state| {
            normalize(&transform_variables(state), &dataset.stats)
                .field(Variable::Theta)
                .data()
                .to_vec()
        })
        .collect()
}

pub(crate) fn theta_trajectories(dataset: &Dataset, indices: &[usize]) -> Vec<Trajectory> {
    indices
        .iter()
        .map(|&i| theta_trajectory(dataset, &dataset.records[i]))
        .collect()
}

pub(crate) fn state_tensor(values: &[f64], h: usize, w: usize) -> Result<Tensor, CliError> {
    Tensor::new(&[1, h, w], values.to_vec())
        .map_err(|e| CliError::Data(format!("stored state does not fill the grid: {e}")))
}

/// Builds the model and fills it from a checkpoint, classifying failures:
/// a shape/name mismatch means the wrong preset or config (exit 2), an
/// unreadable or corrupt file is a data problem (exit 3).
pub(crate) fn load_model(ae: AEConfig, checkpoint: &Path) -> Result<KoopmanAE, CliError> {
    KoopmanAE::load(ae, checkpoint).map_err(|e| match e {
        KoopmanError::CheckpointMismatch(msg) => CliError::Config(format!(
            "checkpoint {} does not fit the configured model: {msg}",
            checkpoint.display()
        )),
        KoopmanError::InvalidConfig(msg) => CliError::Config(msg),
        other => CliError::Data(format!("checkpoint {}: {other}", checkpoint.display())),
    })
}

pub(crate) fn parse_variable(name: &str) -> Result<Variable, CliError> {
    Variable::ALL
        .into_iter()
        .find(|v| v.name() == name)
        .ok_or_else(|| {
            CliError::Config(format!(
                "unknown variable {name:?}; expected one of rho, u1, u3, theta"
            ))
        })
}

pub(crate) fn record_at<'a>(
    dataset: &'a Dataset,
    index: usize,
) -> Result<&'a TrajectoryRecord, CliError> {
    dataset.records.get(index).ok_or_else(|| {
        CliError::Config(format!(
            "trajectory index {index} out of range (dataset has {} records)",
            dataset.records.len()
        ))
    })
}

pub(crate) fn mean_squared_error(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

pub(crate) fn l2_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
