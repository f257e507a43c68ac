//! `generate`: sample bubble scenarios, run the solver, and persist the
//! resulting trajectory dataset with its normalization statistics.

use crate::{echo_config, load_config_file, prepare_out_dir, CliError, CommonArgs, Preset};
use clap::{Args, ValueEnum};
use kbub_core::dataset::{write_dataset, Dtype};
use kbub_core::euler::{EulerSolver, Grid2D, PhysConstants};
use kbub_core::pipeline::{compute_norm_stats, transform_variables, TransformedFields};
use kbub_core::scenario::{
    generate_trajectory, sample_scenario, split_dataset, ScenarioConfig, ScenarioError,
    TrajectoryRecord,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// On-disk value format; f32 halves the footprint and training tolerates it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Storage {
    F32,
    F64,
}

impl Storage {
    fn dtype(self) -> Dtype {
        match self {
            Storage::F32 => Dtype::F32,
            Storage::F64 => Dtype::F64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub n_trajectories: usize,
    /// Grid cells in x and z; also the image size the model trains on.
    pub nx: usize,
    pub nz: usize,
    /// Physical domain extent in meters.
    pub domain_x: f64,
    pub domain_z: f64,
    pub storage: Storage,
    /// Fraction of trajectories (by file order) whose states feed the
    /// persisted normalization statistics; the same boundary is the
    /// default train/validation split downstream.
    pub split_ratio: f64,
    pub scenario: ScenarioConfig,
}

impl Default for GenerateConfig {
    /// Desk-scale defaults: a 32x32 grid and 60 output intervals.
    fn default() -> Self {
        GenerateConfig {
            n_trajectories: 20,
            nx: 32,
            nz: 32,
            domain_x: 1000.0,
            domain_z: 1000.0,
            storage: Storage::F32,
            split_ratio: 0.8,
            scenario: ScenarioConfig {
                n_steps: 60,
                ..ScenarioConfig::default()
            },
        }
    }
}

impl GenerateConfig {
    pub fn apply_preset(&mut self, preset: Preset) {
        match preset {
            Preset::Paper => {
                self.nx = 100;
                self.nz = 100;
                self.scenario.n_steps = 215;
            }
            Preset::Desk => {
                self.nx = 32;
                self.nz = 32;
                self.scenario.n_steps = 60;
            }
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of trajectories to generate.
    #[arg(long)]
    pub n: Option<usize>,
    /// Output intervals per trajectory (5 s each).
    #[arg(long)]
    pub steps: Option<u32>,
    /// Grid cells in x.
    #[arg(long)]
    pub nx: Option<usize>,
    /// Grid cells in z.
    #[arg(long)]
    pub nz: Option<usize>,
}

#[derive(Debug, Serialize)]
struct SkippedScenario {
    index: usize,
    n_saved: usize,
}

#[derive(Debug, Serialize)]
struct RecordMeta {
    scenario_index: usize,
    n_states: usize,
    truncated: bool,
    n_bubbles: usize,
}

#[derive(Debug, Serialize)]
struct GenerateMeta {
    requested: usize,
    written: usize,
    truncated: usize,
    skipped: Vec<SkippedScenario>,
    records: Vec<RecordMeta>,
}

fn resolve_config(args: &GenerateArgs) -> Result<GenerateConfig, CliError> {
    let mut config: GenerateConfig = match &args.common.config {
        Some(path) => load_config_file(path)?,
        None => GenerateConfig::default(),
    };
    if let Some(preset) = args.common.preset {
        config.apply_preset(preset);
    }
    if let Some(seed) = args.common.seed {
        config.scenario.seed = seed;
    }
    if let Some(n) = args.n {
        config.n_trajectories = n;
    }
    if let Some(steps) = args.steps {
        config.scenario.n_steps = steps;
    }
    if let Some(nx) = args.nx {
        config.nx = nx;
    }
    if let Some(nz) = args.nz {
        config.nz = nz;
    }
    if config.n_trajectories == 0 {
        return Err(CliError::Config("n_trajectories must be positive".into()));
    }
    config
        .scenario
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

pub fn cmd_generate(args: GenerateArgs) -> Result<(), CliError> {
    let config = resolve_config(&args)?;
    let out = prepare_out_dir(&args.common.out, "generate")?;
    echo_config(&out, &config)?;

    let grid = Grid2D::new(config.nx, config.nz, config.domain_x, config.domain_z)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let solver = EulerSolver::new(grid, PhysConstants::default())
        .map_err(|e| CliError::Config(e.to_string()))?;

    // Each trajectory draws from its own counter-mode stream of the master
    // seed, so the fan-out is deterministic regardless of scheduling.
    let results: Vec<Result<TrajectoryRecord, ScenarioError>> = (0..config.n_trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.scenario.seed);
            rng.set_stream(i as u64);
            let specs = sample_scenario(&mut rng, &config.scenario)?;
            generate_trajectory(&solver, &specs, &config.scenario)
        })
        .collect();

    let mut records = Vec::new();
    let mut meta = GenerateMeta {
        requested: config.n_trajectories,
        written: 0,
        truncated: 0,
        skipped: Vec::new(),
        records: Vec::new(),
    };
    for (index, result) in results.into_iter().enumerate() {
        match result {
            Ok(record) => {
                meta.records.push(RecordMeta {
                    scenario_index: index,
                    n_states: record.states.len(),
                    truncated: record.truncated,
                    n_bubbles: record.specs.len(),
                });
                meta.truncated += usize::from(record.truncated);
                records.push(record);
            }
            Err(ScenarioError::TooShortAfterTruncation { n_saved }) => {
                meta.skipped.push(SkippedScenario { index, n_saved });
            }
            Err(ScenarioError::InvalidConfig(msg)) => return Err(CliError::Config(msg)),
            Err(other) => {
                return Err(CliError::Numerical(format!("scenario {index}: {other}")))
            }
        }
    }
    meta.written = records.len();
    if records.is_empty() {
        return Err(CliError::Data(
            "all scenarios failed; nothing to write".into(),
        ));
    }
    if records.len() < 2 {
        return Err(CliError::Data(format!(
            "only {} usable trajectory; at least 2 are needed for a train/validation split",
            records.len()
        )));
    }

    // Normalization statistics come from the training block only.
    let (train_idx, _) = split_dataset(records.len(), config.split_ratio)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let train_fields: Vec<TransformedFields> = train_idx
        .iter()
        .flat_map(|&i| records[i].states.iter().map(transform_variables))
        .collect();
    let stats = compute_norm_stats(train_fields.iter())
        .map_err(|e| CliError::Numerical(e.to_string()))?;

    let dataset_path = out.join("dataset.kbub");
    write_dataset(
        &dataset_path,
        config.nx as u32,
        config.nz as u32,
        config.storage.dtype(),
        &stats,
        &records,
    )
    .map_err(|e| CliError::Data(format!("writing {}: {e}", dataset_path.display())))?;
    crate::write_json(&out.join("meta.json"), &meta)?;

    eprintln!(
        "generated {}/{} trajectories ({} truncated, {} skipped) -> {}",
        meta.written,
        meta.requested,
        meta.truncated,
        meta.skipped.len(),
        dataset_path.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bare_args() -> GenerateArgs {
        GenerateArgs {
            common: CommonArgs {
                config: None,
                seed: None,
                out: None,
                preset: None,
            },
            n: None,
            steps: None,
            nx: None,
            nz: None,
        }
    }

    #[test]
    fn presets_pin_grid_and_horizon() {
        let mut config = GenerateConfig::default();
        config.apply_preset(Preset::Paper);
        assert_eq!((config.nx, config.nz), (100, 100));
        assert_eq!(config.scenario.n_steps, 215);
        config.apply_preset(Preset::Desk);
        assert_eq!((config.nx, config.nz), (32, 32));
        assert_eq!(config.scenario.n_steps, 60);
    }

    #[test]
    fn flags_override_defaults() {
        let mut args = bare_args();
        args.common.seed = Some(77);
        args.n = Some(3);
        args.steps = Some(9);
        args.nx = Some(24);
        let config = resolve_config(&args).unwrap();
        assert_eq!(config.scenario.seed, 77);
        assert_eq!(config.n_trajectories, 3);
        assert_eq!(config.scenario.n_steps, 9);
        assert_eq!((config.nx, config.nz), (24, 32));
    }

    #[test]
    fn zero_trajectories_is_a_config_error() {
        let mut args = bare_args();
        args.n = Some(0);
        assert!(matches!(
            resolve_config(&args),
            Err(CliError::Config(_))
        ));
    }
}
