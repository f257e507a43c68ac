//! `rollout`: advance the trained model in closed loop from a stored
//! trajectory's first state and score the drift against the stored truth.
//!
//! The default loop feeds each decoded output back through the full model
//! (encode, advance, decode); `--latent-rollout` instead iterates the
//! Koopman matrix in latent space and only decodes for output. Both run in
//! normalized space and denormalize when writing states.

use crate::data::{
    check_model_grid, load_model, mean_squared_error, read_dataset_checked, record_at,
    state_tensor, theta_trajectory,
};
use crate::{echo_config, load_config_file, prepare_out_dir, CliError, CommonArgs, Preset};
use clap::Args;
use kbub_core::koopman::{AEConfig, KoopmanModel};
use kbub_core::pipeline::Variable;
use kbub_core::tensor::{Tape, TensorError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::PathBuf;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub ae: AEConfig,
    /// Which stored trajectory provides the initial state and ground truth.
    pub trajectory: usize,
    /// Closed-loop steps to advance; 0 reproduces the reconstruction.
    pub steps: usize,
    /// Iterate the Koopman matrix in latent space instead of re-encoding
    /// the decoded prediction.
    pub latent: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            dataset: PathBuf::from("runs/generate/dataset.kbub"),
            checkpoint: PathBuf::from("runs/train/checkpoint.kprm"),
            ae: AEConfig::desk(),
            trajectory: 0,
            steps: 215,
            latent: false,
        }
    }
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset file with the initial state and ground truth.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Trained model checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Trajectory index within the dataset.
    #[arg(long)]
    pub trajectory: Option<usize>,
    /// Steps to advance.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Iterate in latent space (decode only for output).
    #[arg(long = "latent-rollout")]
    pub latent: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StepError {
    pub step: usize,
    pub mse: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RolloutReport {
    pub trajectory: usize,
    pub steps_requested: usize,
    /// Steps actually advanced (frames written minus the reconstruction).
    pub steps_completed: usize,
    pub latent: bool,
    /// Step at which a non-finite state appeared, if the loop was cut short.
    pub non_finite_at: Option<usize>,
    pub nz: usize,
    pub nx: usize,
    /// Frames in states.bin: f64 little-endian, row-major nz x nx each,
    /// denormalized transformed temperature.
    pub frame_count: usize,
    pub states_file: String,
    /// Per-step MSE against the stored trajectory, while truth lasts.
    pub divergence: Vec<StepError>,
}

fn resolve_config(args: &RolloutArgs) -> Result<RolloutConfig, CliError> {
    let mut config: RolloutConfig = match &args.common.config {
        Some(path) => load_config_file(path)?,
        None => RolloutConfig::default(),
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
    if let Some(trajectory) = args.trajectory {
        config.trajectory = trajectory;
    }
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    if args.latent {
        config.latent = true;
    }
    config
        .ae
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

pub fn cmd_rollout(args: RolloutArgs) -> Result<(), CliError> {
    let config = resolve_config(&args)?;
    let out = prepare_out_dir(&args.common.out, "rollout")?;
    echo_config(&out, &config)?;

    let dataset = read_dataset_checked(&config.dataset)?;
    check_model_grid(&config.ae, &dataset)?;
    let record = record_at(&dataset, config.trajectory)?;
    let truth = theta_trajectory(&dataset, record);
    if truth.is_empty() {
        return Err(CliError::Data(format!(
            "trajectory {} has no stored states",
            config.trajectory
        )));
    }
    let (h, w) = (config.ae.input_h, config.ae.input_w);
    let model = load_model(config.ae.clone(), &config.checkpoint)?;

    // Frame 0 is the reconstruction of the initial state; frame k its
    // k-step advancement. The loop stays in normalized space throughout.
    let mut frames: Vec<Vec<f64>> = Vec::new();
    let mut non_finite_at: Option<usize> = None;
    let x0 = state_tensor(&truth[0], h, w)?;
    let tape = Tape::new();
    let walked: Result<(), TensorError> = tape.no_grad(|| {
        let push = |frames: &mut Vec<Vec<f64>>, data: Vec<f64>| -> bool {
            let ok = data.iter().all(|v| v.is_finite());
            if ok {
                frames.push(data);
            }
            ok
        };
        if config.latent {
            let mut z = model.encode(&tape, &x0)?;
            let first = model.decode(&tape, &z)?.to_vec();
            if !push(&mut frames, first) {
                non_finite_at = Some(0);
                return Ok(());
            }
            for step in 1..=config.steps {
                z = model.apply_koopman(&tape, &z)?;
                let decoded = model.decode(&tape, &z)?.to_vec();
                if !push(&mut frames, decoded) {
                    non_finite_at = Some(step);
                    return Ok(());
                }
            }
        } else {
            let first = model.reconstruct(&tape, &x0)?;
            if !push(&mut frames, first.to_vec()) {
                non_finite_at = Some(0);
                return Ok(());
            }
            let mut current = first;
            for step in 1..=config.steps {
                let next = model.predict_next(&tape, &current)?;
                if !push(&mut frames, next.to_vec()) {
                    non_finite_at = Some(step);
                    return Ok(());
                }
                current = next;
            }
        }
        Ok(())
    });
    walked.map_err(|e| CliError::Numerical(e.to_string()))?;

    // Frame k corresponds to stored state k*m (one Koopman application
    // spans m save intervals).
    let divergence: Vec<StepError> = frames
        .iter()
        .enumerate()
        .filter_map(|(k, frame)| {
            let truth_idx = k * config.ae.m;
            truth.get(truth_idx).map(|gt| StepError {
                step: k,
                mse: mean_squared_error(frame, gt),
            })
        })
        .collect();

    let theta = Variable::Theta.index();
    let (mean, std) = (dataset.stats.mean[theta], dataset.stats.std[theta]);
    let mut bytes = Vec::with_capacity(frames.len() * h * w * 8);
    for frame in &frames {
        for v in frame {
            bytes.extend_from_slice(&(v * std + mean).to_le_bytes());
        }
    }
    let states_path = out.join("states.bin");
    fs::write(&states_path, bytes)
        .map_err(|e| CliError::Data(format!("writing {}: {e}", states_path.display())))?;

    let report = RolloutReport {
        trajectory: config.trajectory,
        steps_requested: config.steps,
        steps_completed: frames.len().saturating_sub(1),
        latent: config.latent,
        non_finite_at,
        nz: h,
        nx: w,
        frame_count: frames.len(),
        states_file: "states.bin".into(),
        divergence,
    };
    crate::write_json(&out.join("rollout.json"), &report)?;

    match non_finite_at {
        Some(step) => Err(CliError::Numerical(format!(
            "rollout hit a non-finite state at step {step}; last good step {} written",
            report.steps_completed
        ))),
        None => {
            eprintln!(
                "rolled out {} steps ({} frames) from trajectory {}",
                report.steps_completed, report.frame_count, report.trajectory
            );
            Ok(())
        }
    }
}
