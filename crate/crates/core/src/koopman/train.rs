//! Training loop: consecutive-pair construction with horizontal-flip
//! augmentation, minibatch Adam, and early stopping on the validation
//! objective.

use super::{compute_losses, KoopmanAE, LossBreakdown};
use crate::tensor::adam::{Adam, AdamConfig};
use crate::tensor::checkpoint::ParamEntry;
use crate::tensor::{Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One trajectory: saved states in time order, each a flattened row-major
/// H*W field (single variable, already normalized).
pub type Trajectory = Vec<Vec<f64>>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error("non-finite loss at epoch {epoch} ({context}); last good checkpoint attached")]
    NonFinite {
        epoch: usize,
        context: String,
        last_good: Vec<ParamEntry>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Loss summaries for one epoch: training losses are averaged over the
/// (augmented) pairs actually optimized, validation over unaugmented pairs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    /// 1-based epoch with the lowest validation objective.
    pub best_epoch: usize,
    pub best_val_total: f64,
    /// True when patience ran out before the epoch budget.
    pub stopped_early: bool,
}

/// Result of a run: the report plus a checkpoint of the best parameters
/// together with the optimizer state at that point (`adam.*` entries).
#[derive(Debug)]
pub struct TrainOutput {
    pub report: TrainReport,
    pub checkpoint: Vec<ParamEntry>,
}

struct PairRef {
    traj: usize,
    step: usize,
}

fn build_pairs(trajs: &[Trajectory], field_len: usize, what: &str) -> Result<Vec<PairRef>, TrainError> {
    let mut pairs = Vec::new();
    for (t, traj) in trajs.iter().enumerate() {
        for (s, state) in traj.iter().enumerate() {
            if state.len() != field_len {
                return Err(TrainError::Invalid(format!(
                    "{what} trajectory {t} state {s} has {} values, expected {field_len}",
                    state.len()
                )));
            }
        }
        for step in 0..traj.len().saturating_sub(1) {
            pairs.push(PairRef { traj: t, step });
        }
    }
    if pairs.is_empty() {
        return Err(TrainError::Invalid(format!(
            "{what} set has no consecutive state pairs"
        )));
    }
    Ok(pairs)
}

/// Mirrors a flattened row-major field about the vertical axis.
fn flip_horizontal(data: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(w) {
        out.extend(row.iter().rev());
    }
    out
}

fn state_tensor(data: &[f64], h: usize, w: usize, flip: bool) -> Tensor {
    let values = if flip {
        flip_horizontal(data, w)
    } else {
        data.to_vec()
    };
    Tensor::new(&[1, h, w], values).expect("length checked at pair construction")
}

#[derive(Clone)]
struct Snapshot {
    params: Vec<Vec<f64>>,
    adam_m: Vec<Vec<f64>>,
    adam_v: Vec<Vec<f64>>,
    adam_step: u64,
}

fn take_snapshot(model: &KoopmanAE, adam: &Adam) -> Snapshot {
    let (m, v, step) = adam.state();
    Snapshot {
        params: model.parameters().iter().map(|p| p.to_vec()).collect(),
        adam_m: m.to_vec(),
        adam_v: v.to_vec(),
        adam_step: step,
    }
}

fn restore_snapshot(model: &KoopmanAE, snap: &Snapshot) {
    for (p, data) in model.parameters().iter().zip(&snap.params) {
        p.with_data_mut(|d| d.copy_from_slice(data));
    }
}

fn snapshot_entries(model: &KoopmanAE, snap: &Snapshot) -> Vec<ParamEntry> {
    let named = model.named_parameters();
    let mut entries: Vec<ParamEntry> = named
        .iter()
        .zip(&snap.params)
        .map(|((name, t), data)| ParamEntry::new(name.clone(), t.shape(), data.clone()))
        .collect();
    for ((name, t), m) in named.iter().zip(&snap.adam_m) {
        entries.push(ParamEntry::new(format!("adam.m.{name}"), t.shape(), m.clone()));
    }
    for ((name, t), v) in named.iter().zip(&snap.adam_v) {
        entries.push(ParamEntry::new(format!("adam.v.{name}"), t.shape(), v.clone()));
    }
    entries.push(ParamEntry::scalar("adam.step", snap.adam_step as f64));
    entries
}

/// Extracts optimizer state from checkpoint entries, if present. Returns
/// `Ok(None)` when the checkpoint has no `adam.*` entries (fresh optimizer),
/// an error when they are present but inconsistent with the model.
pub(crate) fn adam_state_from_entries(
    model: &KoopmanAE,
    entries: &[ParamEntry],
) -> Result<Option<(Vec<Vec<f64>>, Vec<Vec<f64>>, u64)>, TrainError> {
    let has_any = entries.iter().any(|e| e.name.starts_with("adam."));
    if !has_any {
        return Ok(None);
    }
    let find = |name: &str| -> Result<Vec<f64>, TrainError> {
        entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.data.clone())
            .ok_or_else(|| TrainError::Invalid(format!("checkpoint lacks {name}")))
    };
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, _) in model.named_parameters() {
        m.push(find(&format!("adam.m.{name}"))?);
        v.push(find(&format!("adam.v.{name}"))?);
    }
    let step = find("adam.step")?;
    if step.len() != 1 || step[0] < 0.0 || step[0].fract() != 0.0 {
        return Err(TrainError::Invalid("adam.step must be a whole scalar".into()));
    }
    Ok(Some((m, v, step[0] as u64)))
}

fn mean_breakdown(sums: &LossBreakdown, n: usize) -> LossBreakdown {
    let k = n.max(1) as f64;
    LossBreakdown {
        recon: sums.recon / k,
        pred: sums.pred / k,
        lin: sums.lin / k,
        noise: sums.noise / k,
        repl: sums.repl / k,
        total: sums.total / k,
    }
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.recon += b.recon;
    acc.pred += b.pred;
    acc.lin += b.lin;
    acc.noise += b.noise;
    acc.repl += b.repl;
    acc.total += b.total;
}

/// Trains the model in place. Iterates epochs over shuffled consecutive
/// pairs (each pair horizontally flipped with probability 1/2), accumulates
/// minibatch-mean gradients, and steps Adam. After every epoch the
/// validation objective (mean total loss, unaugmented) decides early
/// stopping: no improvement for `patience` consecutive epochs ends the run.
/// The model is left at its best-validation parameters, which are also
/// returned as a checkpoint together with the optimizer state.
///
/// `resume` accepts the `adam.*` entries of a previous checkpoint so the
/// optimizer continues its step count and moment estimates.
pub fn train(
    model: &mut KoopmanAE,
    train_trajs: &[Trajectory],
    val_trajs: &[Trajectory],
    resume: Option<&[ParamEntry]>,
) -> Result<TrainOutput, TrainError> {
    let config = model.config().clone();
    let (h, w) = (config.input_h, config.input_w);
    let field_len = h * w;
    let train_pairs = build_pairs(train_trajs, field_len, "training")?;
    let val_pairs = build_pairs(val_trajs, field_len, "validation")?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(
        model.parameters(),
        AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    if let Some(entries) = resume {
        if let Some((m, v, step)) = adam_state_from_entries(model, entries)? {
            adam.restore(m, v, step)?;
        }
    }

    let mut best = take_snapshot(model, &adam);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut train_sums = LossBreakdown::ZERO;

        for batch in order.chunks(config.batch_size) {
            adam.zero_grad();
            let batch_scale = 1.0 / batch.len() as f64;
            for &pair_idx in batch {
                let pair = &train_pairs[pair_idx];
                let flip = rng.random_bool(0.5);
                let x_k = state_tensor(&train_trajs[pair.traj][pair.step], h, w, flip);
                let x_k1 = state_tensor(&train_trajs[pair.traj][pair.step + 1], h, w, flip);
                let tape = Tape::new();
                let (total, breakdown) = compute_losses(&tape, model, &x_k, &x_k1)?;
                if !breakdown.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        context: format!(
                            "pair (trajectory {}, step {}): {breakdown:?}",
                            pair.traj, pair.step
                        ),
                        last_good: snapshot_entries(model, &best),
                    });
                }
                add_breakdown(&mut train_sums, &breakdown);
                let scaled = crate::tensor::ops::scale(&tape, &total, batch_scale);
                tape.backward(&scaled)?;
            }
            if let Err(TensorError::NonFinite(msg)) = adam.step() {
                return Err(TrainError::NonFinite {
                    epoch,
                    context: format!("optimizer step: {msg}"),
                    last_good: snapshot_entries(model, &best),
                });
            }
        }

        let mut val_sums = LossBreakdown::ZERO;
        for pair in &val_pairs {
            let x_k = state_tensor(&val_trajs[pair.traj][pair.step], h, w, false);
            let x_k1 = state_tensor(&val_trajs[pair.traj][pair.step + 1], h, w, false);
            let tape = Tape::new();
            let (_, breakdown) =
                tape.no_grad(|| compute_losses(&tape, model, &x_k, &x_k1))?;
            if !breakdown.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    context: format!(
                        "validation pair (trajectory {}, step {}): {breakdown:?}",
                        pair.traj, pair.step
                    ),
                    last_good: snapshot_entries(model, &best),
                });
            }
            add_breakdown(&mut val_sums, &breakdown);
        }

        let report = EpochReport {
            epoch,
            train: mean_breakdown(&train_sums, train_pairs.len()),
            val: mean_breakdown(&val_sums, val_pairs.len()),
        };
        epochs.push(report);

        if report.val.total < best_val {
            best_val = report.val.total;
            best_epoch = epoch;
            best = take_snapshot(model, &adam);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= config.patience {
            stopped_early = epoch < config.max_epochs;
            break;
        }
    }

    restore_snapshot(model, &best);
    Ok(TrainOutput {
        report: TrainReport {
            epochs,
            best_epoch,
            best_val_total: best_val,
            stopped_early,
        },
        checkpoint: snapshot_entries(model, &best),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::koopman::AEConfig;

    /// Small architecture so loop mechanics can be tested in milliseconds.
    fn tiny_config() -> AEConfig {
        AEConfig {
            input_h: 8,
            input_w: 8,
            channels: vec![4],
            flatten: 64,
            koopman_dim: 16,
            learning_rate: 1e-3,
            patience: 3,
            batch_size: 4,
            max_epochs: 4,
            seed: 40,
            ..AEConfig::desk()
        }
    }

    fn tiny_model(config: &AEConfig) -> KoopmanAE {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        KoopmanAE::new(config.clone(), &mut rng).expect("tiny config is valid")
    }

    /// A drifting bump: smooth, deterministic, non-constant in time.
    fn synthetic_trajectory(n_states: usize, h: usize, w: usize, phase: f64) -> Trajectory {
        (0..n_states)
            .map(|t| {
                let cx = 0.3 * w as f64 + 0.04 * w as f64 * t as f64 + phase;
                (0..h * w)
                    .map(|idx| {
                        let (j, i) = (idx / w, idx % w);
                        let d2 = (i as f64 - cx).powi(2) + (j as f64 - 0.5 * h as f64).powi(2);
                        (-d2 / 8.0).exp()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn patience_zero_runs_exactly_one_epoch() {
        let mut config = tiny_config();
        config.patience = 0;
        config.max_epochs = 10;
        let mut model = tiny_model(&config);
        let train_set = vec![synthetic_trajectory(3, 8, 8, 0.0)];
        let val_set = vec![synthetic_trajectory(3, 8, 8, 1.0)];
        let out = train(&mut model, &train_set, &val_set, None).unwrap();
        assert_eq!(out.report.epochs.len(), 1, "zero patience stops after epoch one");
        assert_eq!(out.report.best_epoch, 1);
        assert!(out.report.stopped_early);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let config = tiny_config();
            let mut model = tiny_model(&config);
            let train_set = vec![
                synthetic_trajectory(4, 8, 8, 0.0),
                synthetic_trajectory(4, 8, 8, 2.0),
            ];
            let val_set = vec![synthetic_trajectory(3, 8, 8, 1.0)];
            train(&mut model, &train_set, &val_set, None).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.report.epochs.len(), b.report.epochs.len());
        for (ea, eb) in a.report.epochs.iter().zip(&b.report.epochs) {
            assert_eq!(ea.train.total, eb.train.total, "epoch {} train", ea.epoch);
            assert_eq!(ea.val.total, eb.val.total, "epoch {} val", ea.epoch);
        }
        for (pa, pb) in a.checkpoint.iter().zip(&b.checkpoint) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.data, pb.data, "checkpoint entry {}", pa.name);
        }
    }

    #[test]
    fn objective_improves_on_smooth_data() {
        let mut config = tiny_config();
        config.max_epochs = 12;
        config.patience = 12;
        config.learning_rate = 3e-3;
        let mut model = tiny_model(&config);
        let train_set = vec![
            synthetic_trajectory(5, 8, 8, 0.0),
            synthetic_trajectory(5, 8, 8, 1.5),
        ];
        let val_set = vec![synthetic_trajectory(5, 8, 8, 0.7)];
        let out = train(&mut model, &train_set, &val_set, None).unwrap();
        let first = out.report.epochs[0].val.total;
        assert!(
            out.report.best_val_total < first,
            "validation objective should improve: epoch-1 {first}, best {}",
            out.report.best_val_total
        );
        assert!(out.report.best_epoch >= 1);
    }

    #[test]
    fn model_ends_at_best_parameters() {
        let config = tiny_config();
        let mut model = tiny_model(&config);
        let train_set = vec![synthetic_trajectory(4, 8, 8, 0.0)];
        let val_set = vec![synthetic_trajectory(3, 8, 8, 1.0)];
        let out = train(&mut model, &train_set, &val_set, None).unwrap();
        // Checkpoint parameter entries must equal the in-place model.
        let named = model.named_parameters();
        for (name, tensor) in &named {
            let entry = out
                .checkpoint
                .iter()
                .find(|e| &e.name == name)
                .unwrap_or_else(|| panic!("{name} missing from checkpoint"));
            assert_eq!(entry.data, tensor.to_vec(), "{name} restored to best");
        }
        assert!(
            out.checkpoint.iter().any(|e| e.name == "adam.step"),
            "checkpoint carries optimizer state"
        );
    }

    #[test]
    fn resume_continues_the_step_counter() {
        let config = tiny_config();
        let mut model = tiny_model(&config);
        let train_set = vec![synthetic_trajectory(4, 8, 8, 0.0)];
        let val_set = vec![synthetic_trajectory(3, 8, 8, 1.0)];
        let first = train(&mut model, &train_set, &val_set, None).unwrap();
        let step_after_first = first
            .checkpoint
            .iter()
            .find(|e| e.name == "adam.step")
            .expect("step entry")
            .data[0];
        assert!(step_after_first > 0.0, "optimizer stepped at least once");

        let second = train(&mut model, &train_set, &val_set, Some(&first.checkpoint)).unwrap();
        let step_after_second = second
            .checkpoint
            .iter()
            .find(|e| e.name == "adam.step")
            .expect("step entry")
            .data[0];
        assert!(
            step_after_second > step_after_first,
            "resumed run continues counting: {step_after_first} -> {step_after_second}"
        );
    }

    #[test]
    fn non_finite_loss_aborts_with_last_good_checkpoint() {
        let config = tiny_config();
        let mut model = tiny_model(&config);
        let before: Vec<Vec<f64>> = model.parameters().iter().map(|p| p.to_vec()).collect();
        // Poison the latent projection bias: it reaches the linearity MSE
        // with no intervening activation, so the loss goes NaN immediately.
        let latent_bias = model
            .named_parameters()
            .into_iter()
            .find(|(name, _)| name == "latent1.bias")
            .expect("latent bias parameter")
            .1;
        latent_bias.with_data_mut(|d| d[0] = f64::NAN);
        let train_set = vec![synthetic_trajectory(3, 8, 8, 0.0)];
        let val_set = vec![synthetic_trajectory(3, 8, 8, 1.0)];
        let err = train(&mut model, &train_set, &val_set, None).unwrap_err();
        match err {
            TrainError::NonFinite { epoch, last_good, .. } => {
                assert_eq!(epoch, 1);
                // The attached checkpoint is the last snapshot taken before
                // any optimizer step; every unpoisoned parameter is intact.
                let named_count = model.named_parameters().len();
                assert!(last_good.len() > named_count, "params + adam entries");
                assert_eq!(last_good[0].data, before[0], "untouched parameter preserved");
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn empty_datasets_are_rejected() {
        let config = tiny_config();
        let mut model = tiny_model(&config);
        let good = vec![synthetic_trajectory(3, 8, 8, 0.0)];
        let single_state = vec![synthetic_trajectory(1, 8, 8, 0.0)];
        assert!(matches!(
            train(&mut model, &single_state, &good, None),
            Err(TrainError::Invalid(_))
        ));
        assert!(matches!(
            train(&mut model, &good, &[], None),
            Err(TrainError::Invalid(_))
        ));
        let wrong_len = vec![vec![vec![0.0; 63]; 3]];
        assert!(matches!(
            train(&mut model, &wrong_len, &good, None),
            Err(TrainError::Invalid(_))
        ));
    }

    #[test]
    fn flip_mirrors_rows() {
        let data: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let flipped = flip_horizontal(&data, 3);
        assert_eq!(flipped, vec![2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        let twice = flip_horizontal(&flipped, 3);
        assert_eq!(twice, data, "double flip is the identity");
    }
}
