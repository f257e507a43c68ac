//! `train`: fit the Koopman autoencoder on the normalized transformed
//! temperature of a stored dataset, with optional resume from a checkpoint.

use crate::data::{check_model_grid, read_dataset_checked, theta_trajectories};
use crate::{echo_config, load_config_file, prepare_out_dir, CliError, CommonArgs, Preset};
use clap::Args;
use kbub_core::koopman::{train, AEConfig, KoopmanAE, KoopmanError, TrainError};
use kbub_core::scenario::split_dataset;
use kbub_core::tensor::checkpoint::{load_checkpoint, save_checkpoint};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub ae: AEConfig,
    /// Train/validation boundary as a fraction of trajectories in file order.
    pub split_ratio: f64,
    /// Checkpoint to continue from; optimizer state in it is reused.
    pub resume: Option<PathBuf>,
    /// Write a wall-clock sidecar (timing.json). Off by default so two runs
    /// with the same seed leave byte-identical output directories.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: PathBuf::from("runs/generate/dataset.kbub"),
            ae: AEConfig::desk(),
            split_ratio: 0.8,
            resume: None,
            timing: false,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset file to train on.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Epoch budget.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Also write wall-clock timing (timing.json).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Serialize)]
struct TimingReport {
    wall_seconds: f64,
}

#[derive(Debug, Serialize)]
struct AbortReport {
    epoch: usize,
    context: String,
    last_good_checkpoint: String,
}

fn resolve_config(args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut config: TrainConfig = match &args.common.config {
        Some(path) => load_config_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(preset) = args.common.preset {
        config.ae = match preset {
            Preset::Paper => AEConfig::paper(),
            Preset::Desk => AEConfig::desk(),
        };
    }
    if let Some(seed) = args.common.seed {
        config.ae.seed = seed;
    }
    if let Some(dataset) = &args.dataset {
        config.dataset = dataset.clone();
    }
    if let Some(resume) = &args.resume {
        config.resume = Some(resume.clone());
    }
    if let Some(epochs) = args.epochs {
        config.ae.max_epochs = epochs;
    }
    if let Some(patience) = args.patience {
        config.ae.patience = patience;
    }
    if args.timing {
        config.timing = true;
    }
    config
        .ae
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

pub fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let config = resolve_config(&args)?;
    let out = prepare_out_dir(&args.common.out, "train")?;
    echo_config(&out, &config)?;

    let dataset = read_dataset_checked(&config.dataset)?;
    check_model_grid(&config.ae, &dataset)?;
    let (train_idx, val_idx) = split_dataset(dataset.records.len(), config.split_ratio)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let train_trajs = theta_trajectories(&dataset, &train_idx);
    let val_trajs = theta_trajectories(&dataset, &val_idx);

    let mut rng = ChaCha8Rng::seed_from_u64(config.ae.seed);
    let mut model = KoopmanAE::new(config.ae.clone(), &mut rng)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let resume_entries = match &config.resume {
        Some(path) => {
            let entries = load_checkpoint(path)
                .map_err(|e| CliError::Data(format!("resume checkpoint {}: {e}", path.display())))?;
            model.load_entries(&entries).map_err(|e| match e {
                KoopmanError::CheckpointMismatch(msg) => CliError::Config(format!(
                    "resume checkpoint {} does not fit the configured model: {msg}",
                    path.display()
                )),
                other => CliError::Data(other.to_string()),
            })?;
            Some(entries)
        }
        None => None,
    };

    match train(&mut model, &train_trajs, &val_trajs, resume_entries.as_deref()) {
        Ok(output) => {
            let ckpt_path = out.join("checkpoint.kprm");
            save_checkpoint(&ckpt_path, &output.checkpoint)
                .map_err(|e| CliError::Data(format!("writing {}: {e}", ckpt_path.display())))?;
            crate::write_json(&out.join("report.json"), &output.report)?;
            let wall_seconds = start.elapsed().as_secs_f64();
            if config.timing {
                crate::write_json(&out.join("timing.json"), &TimingReport { wall_seconds })?;
            }
            eprintln!(
                "trained {} epochs in {:.1}s; best validation total {:.6e} at epoch {}",
                output.report.epochs.len(),
                wall_seconds,
                output.report.best_val_total,
                output.report.best_epoch
            );
            Ok(())
        }
        Err(TrainError::NonFinite {
            epoch,
            context,
            last_good,
        }) => {
            let rescue = out.join("checkpoint.last_good.kprm");
            save_checkpoint(&rescue, &last_good)
                .map_err(|e| CliError::Data(format!("writing {}: {e}", rescue.display())))?;
            crate::write_json(
                &out.join("abort.json"),
                &AbortReport {
                    epoch,
                    context: context.clone(),
                    last_good_checkpoint: rescue.display().to_string(),
                },
            )?;
            Err(CliError::Numerical(format!(
                "training aborted at epoch {epoch}: {context}"
            )))
        }
        Err(TrainError::Invalid(msg)) => Err(CliError::Data(msg)),
        Err(TrainError::Tensor(e)) => Err(CliError::Numerical(e.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bare_args() -> TrainArgs {
        TrainArgs {
            common: CommonArgs {
                config: None,
                seed: None,
                out: None,
                preset: None,
            },
            dataset: None,
            resume: None,
            epochs: None,
            patience: None,
            timing: false,
        }
    }

    #[test]
    fn preset_then_flags_resolve_in_order() {
        let mut args = bare_args();
        args.common.preset = Some(Preset::Desk);
        args.common.seed = Some(9);
        args.epochs = Some(7);
        args.patience = Some(2);
        let config = resolve_config(&args).unwrap();
        assert_eq!(config.ae.input_h, 32, "desk preset grid");
        assert_eq!(config.ae.seed, 9, "seed flag wins");
        assert_eq!(config.ae.max_epochs, 7);
        assert_eq!(config.ae.patience, 2);
        assert!(!config.timing, "timing sidecar is opt-in");
    }

    #[test]
    fn invalid_hyperparameters_are_config_errors() {
        let mut args = bare_args();
        args.epochs = Some(0);
        assert!(matches!(resolve_config(&args), Err(CliError::Config(_))));
    }
}
