//! `evaluate`: reconstruction and one-step-prediction quality of a trained
//! model on the validation split, reported per sample and in aggregate.

use crate::data::{
    check_model_grid, l2_error, load_model, mean_squared_error, read_dataset_checked,
    state_tensor, theta_trajectories,
};
use crate::{echo_config, load_config_file, prepare_out_dir, CliError, CommonArgs, Preset};
use clap::Args;
use kbub_core::koopman::{compute_losses, AEConfig, KoopmanAE, LossBreakdown};
use kbub_core::scenario::split_dataset;
use kbub_core::tensor::{Tape, TensorError};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub ae: AEConfig,
    pub split_ratio: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            dataset: PathBuf::from("runs/generate/dataset.kbub"),
            checkpoint: PathBuf::from("runs/train/checkpoint.kprm"),
            ae: AEConfig::desk(),
            split_ratio: 0.8,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset file holding the validation trajectories.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Trained model checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Metrics for one consecutive validation pair; errors are measured in the
/// model's normalized space.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub trajectory: usize,
    pub step: usize,
    pub recon_mse: f64,
    pub recon_l2: f64,
    pub pred_mse: f64,
    pub pred_l2: f64,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub recon_mse: f64,
    pub recon_l2: f64,
    pub pred_mse: f64,
    pub pred_l2: f64,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub aggregate: AggregateMetrics,
    pub per_sample: Vec<SampleMetrics>,
}

/// Componentwise mean of the per-sample metrics.
pub fn aggregate(samples: &[SampleMetrics]) -> AggregateMetrics {
    let n = samples.len().max(1) as f64;
    let mut sum = AggregateMetrics {
        recon_mse: 0.0,
        recon_l2: 0.0,
        pred_mse: 0.0,
        pred_l2: 0.0,
        losses: LossBreakdown::ZERO,
    };
    for s in samples {
        sum.recon_mse += s.recon_mse;
        sum.recon_l2 += s.recon_l2;
        sum.pred_mse += s.pred_mse;
        sum.pred_l2 += s.pred_l2;
        sum.losses.recon += s.losses.recon;
        sum.losses.pred += s.losses.pred;
        sum.losses.lin += s.losses.lin;
        sum.losses.noise += s.losses.noise;
        sum.losses.repl += s.losses.repl;
        sum.losses.total += s.losses.total;
    }
    AggregateMetrics {
        recon_mse: sum.recon_mse / n,
        recon_l2: sum.recon_l2 / n,
        pred_mse: sum.pred_mse / n,
        pred_l2: sum.pred_l2 / n,
        losses: LossBreakdown {
            recon: sum.losses.recon / n,
            pred: sum.losses.pred / n,
            lin: sum.losses.lin / n,
            noise: sum.losses.noise / n,
            repl: sum.losses.repl / n,
            total: sum.losses.total / n,
        },
    }
}

fn resolve_config(args: &EvaluateArgs) -> Result<EvaluateConfig, CliError> {
    let mut config: EvaluateConfig = match &args.common.config {
        Some(path) => load_config_file(path)?,
        None => EvaluateConfig::default(),
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
    if let Some(checkpoint) = &args.checkpoint {
        config.checkpoint = checkpoint.clone();
    }
    config
        .ae
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

/// Runs every validation pair through the model under a no-grad tape.
fn collect_samples(
    model: &KoopmanAE,
    val_idx: &[usize],
    val_trajs: &[Vec<Vec<f64>>],
    h: usize,
    w: usize,
) -> Result<Vec<SampleMetrics>, CliError> {
    let mut samples = Vec::new();
    for (list_pos, traj) in val_trajs.iter().enumerate() {
        for step in 0..traj.len().saturating_sub(1) {
            let x_k = state_tensor(&traj[step], h, w)?;
            let x_k1 = state_tensor(&traj[step + 1], h, w)?;
            let tape = Tape::new();
            let outcome: Result<_, TensorError> = tape.no_grad(|| {
                let recon = model.reconstruct(&tape, &x_k)?;
                let pred = model.predict_next(&tape, &x_k)?;
                let (_, losses) = compute_losses(&tape, model, &x_k, &x_k1)?;
                Ok((recon.to_vec(), pred.to_vec(), losses))
            });
            let (recon, pred, losses) =
                outcome.map_err(|e| CliError::Numerical(e.to_string()))?;
            samples.push(SampleMetrics {
                trajectory: val_idx[list_pos],
                step,
                recon_mse: mean_squared_error(&recon, &traj[step]),
                recon_l2: l2_error(&recon, &traj[step]),
                pred_mse: mean_squared_error(&pred, &traj[step + 1]),
                pred_l2: l2_error(&pred, &traj[step + 1]),
                losses,
            });
        }
    }
    Ok(samples)
}

pub fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let config = resolve_config(&args)?;
    let out = prepare_out_dir(&args.common.out, "evaluate")?;
    echo_config(&out, &config)?;

    let dataset = read_dataset_checked(&config.dataset)?;
    check_model_grid(&config.ae, &dataset)?;
    let (_, val_idx) = split_dataset(dataset.records.len(), config.split_ratio)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let val_trajs = theta_trajectories(&dataset, &val_idx);
    let model = load_model(config.ae.clone(), &config.checkpoint)?;

    let samples = collect_samples(
        &model,
        &val_idx,
        &val_trajs,
        config.ae.input_h,
        config.ae.input_w,
    )?;
    if samples.is_empty() {
        return Err(CliError::Data(
            "validation split has no consecutive state pairs".into(),
        ));
    }
    let report = MetricsReport {
        n_samples: samples.len(),
        aggregate: aggregate(&samples),
        per_sample: samples,
    };
    crate::write_json(&out.join("metrics.json"), &report)?;
    eprintln!(
        "evaluated {} pairs: one-step MSE {:.6e}, 2-norm {:.6e}",
        report.n_samples, report.aggregate.pred_mse, report.aggregate.pred_l2
    );
    Ok(())
}
