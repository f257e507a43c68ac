//! Bubble-convection scenario sampling, initial conditions, and trajectory
//! generation.
//!
//! A scenario is a small set of warm and cold circular potential-temperature
//! anomalies placed in the hydrostatic background at rest. Scenario
//! parameters are drawn from fixed uniform ranges; trajectories are the
//! solver states saved on a regular output cadence.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::euler::{EulerSolver, Grid2D, PhysConstants, SolverError, State2D};

/// Bubble polarity. Hot bubbles sit above the background potential
/// temperature, cold ones below it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BubbleKind {
    Hot,
    Cold,
}

impl BubbleKind {
    pub fn code(self) -> u8 {
        match self {
            BubbleKind::Hot => 0,
            BubbleKind::Cold => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(BubbleKind::Hot),
            1 => Some(BubbleKind::Cold),
            _ => None,
        }
    }
}

/// One circular anomaly: flat plateau of radius `radius` around
/// (`center_x`, `center_z`) at absolute potential temperature `temperature`,
/// with a Gaussian skirt of width `stability` outside the plateau.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BubbleSpec {
    pub kind: BubbleKind,
    /// Plateau potential temperature in K (not the anomaly amplitude).
    pub temperature: f64,
    /// Plateau radius in m.
    pub radius: f64,
    /// Gaussian decay width in m.
    pub stability: f64,
    pub center_x: f64,
    pub center_z: f64,
}

impl BubbleSpec {
    /// Anomaly amplitude relative to the background potential temperature.
    pub fn amplitude(&self, consts: &PhysConstants) -> f64 {
        self.temperature - consts.theta0
    }

    /// Anomaly value at distance `d` from the bubble center.
    pub fn anomaly_at(&self, d: f64, consts: &PhysConstants) -> f64 {
        let a = self.amplitude(consts);
        if d <= self.radius {
            a
        } else {
            a * (-((d - self.radius) / self.stability).powi(2)).exp()
        }
    }
}

/// Closed interval for a sampled parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn validate(&self, name: &str) -> Result<(), ScenarioError> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(ScenarioError::InvalidConfig(format!(
                "range {name} must satisfy lo <= hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// Sampling ranges for one bubble family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BubbleDomain {
    pub count_min: u32,
    pub count_max: u32,
    pub temperature: Range,
    pub radius: Range,
    pub center_x: Range,
    pub center_z: Range,
}

/// Everything needed to sample and run one scenario family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Number of output intervals to advance; n_steps + 1 states are saved.
    pub n_steps: u32,
    /// Save cadence in seconds.
    pub output_interval: f64,
    pub cfl: f64,
    /// Fixed Gaussian skirt width for every bubble.
    pub stability: f64,
    pub hot: BubbleDomain,
    pub cold: BubbleDomain,
}

impl Default for ScenarioConfig {
    /// The standard 1000 m x 1000 m convection family: one or two hot
    /// bubbles, up to two cold ones, 215 output steps of 5 s.
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            n_steps: 215,
            output_interval: 5.0,
            cfl: 0.4,
            stability: 50.0,
            hot: BubbleDomain {
                count_min: 1,
                count_max: 2,
                temperature: Range::new(303.3, 303.6),
                radius: Range::new(10.0, 80.0),
                center_x: Range::new(300.0, 700.0),
                center_z: Range::new(50.0, 300.0),
            },
            cold: BubbleDomain {
                count_min: 0,
                count_max: 2,
                temperature: Range::new(302.8, 302.9),
                radius: Range::new(10.0, 80.0),
                center_x: Range::new(200.0, 800.0),
                center_z: Range::new(100.0, 750.0),
            },
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.n_steps == 0 {
            return Err(ScenarioError::InvalidConfig(
                "n_steps must be at least 1".into(),
            ));
        }
        if !(self.output_interval > 0.0) {
            return Err(ScenarioError::InvalidConfig(
                "output_interval must be positive".into(),
            ));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(ScenarioError::InvalidConfig(
                "cfl must lie in (0, 1]".into(),
            ));
        }
        if !(self.stability > 0.0) {
            return Err(ScenarioError::InvalidConfig(
                "stability must be positive".into(),
            ));
        }
        for (name, dom) in [("hot", &self.hot), ("cold", &self.cold)] {
            if dom.count_min > dom.count_max {
                return Err(ScenarioError::InvalidConfig(format!(
                    "{name} bubble count range is empty"
                )));
            }
            dom.temperature.validate(&format!("{name}.temperature"))?;
            dom.radius.validate(&format!("{name}.radius"))?;
            if dom.radius.lo <= 0.0 {
                return Err(ScenarioError::InvalidConfig(format!(
                    "{name}.radius must be positive"
                )));
            }
            dom.center_x.validate(&format!("{name}.center_x"))?;
            dom.center_z.validate(&format!("{name}.center_z"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("potential temperature {theta} K non-positive at cell (j = {j}, i = {i})")]
    ThetaNonPositive { j: usize, i: usize, theta: f64 },
    #[error(
        "trajectory unusable: {n_saved} states saved before instability, \
         fewer than 12 needed to survive truncation"
    )]
    TooShortAfterTruncation { n_saved: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Draws one scenario's bubble list.
///
/// The draw order is fixed and part of the reproducibility contract:
/// hot count, cold count, then per hot bubble (temperature, radius,
/// center_x, center_z), then the same per cold bubble.
pub fn sample_scenario(
    rng: &mut impl Rng,
    config: &ScenarioConfig,
) -> Result<Vec<BubbleSpec>, ScenarioError> {
    config.validate()?;
    let n_hot = rng.random_range(config.hot.count_min..=config.hot.count_max);
    let n_cold = rng.random_range(config.cold.count_min..=config.cold.count_max);
    let mut specs = Vec::with_capacity((n_hot + n_cold) as usize);
    for (kind, dom, count) in [
        (BubbleKind::Hot, &config.hot, n_hot),
        (BubbleKind::Cold, &config.cold, n_cold),
    ] {
        for _ in 0..count {
            specs.push(BubbleSpec {
                kind,
                temperature: rng.random_range(dom.temperature.lo..=dom.temperature.hi),
                radius: rng.random_range(dom.radius.lo..=dom.radius.hi),
                stability: config.stability,
                center_x: rng.random_range(dom.center_x.lo..=dom.center_x.hi),
                center_z: rng.random_range(dom.center_z.lo..=dom.center_z.hi),
            });
        }
    }
    Ok(specs)
}

/// Superimposes bubble anomalies on the motionless background.
///
/// The anomalies perturb potential temperature at constant rho_theta (local
/// pressure equilibrium), so density becomes rho_theta / theta and the
/// momenta stay zero. Cells untouched by any bubble reproduce the background
/// bitwise.
pub fn apply_perturbation(
    background: &State2D,
    specs: &[BubbleSpec],
    grid: &Grid2D,
    consts: &PhysConstants,
) -> Result<State2D, ScenarioError> {
    let mut state = background.clone();
    state.time = 0.0;
    let (nz, nx) = state.shape();
    for j in 0..nz {
        let z = grid.z_center(j);
        for i in 0..nx {
            let x = grid.x_center(i);
            let mut anomaly = 0.0;
            for spec in specs {
                let d = ((x - spec.center_x).powi(2) + (z - spec.center_z).powi(2)).sqrt();
                anomaly += spec.anomaly_at(d, consts);
            }
            if anomaly != 0.0 {
                let theta = consts.theta0 + anomaly;
                if theta <= 0.0 {
                    return Err(ScenarioError::ThetaNonPositive { j, i, theta });
                }
                state.rho.set(j, i, background.rho_theta.at(j, i) / theta);
            }
        }
    }
    Ok(state)
}

/// One saved trajectory: its generating specs, the saved states (time k
/// times the output interval for state k), and whether it was cut short.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub specs: Vec<BubbleSpec>,
    pub states: Vec<State2D>,
    pub truncated: bool,
}

/// Number of trailing states dropped when a run goes unstable; the flow is
/// already unreliable well before the first non-finite value appears.
const TRUNCATE_TAIL: usize = 10;

/// Minimum states a truncated trajectory must retain to be a usable sample.
const MIN_SAVED: usize = 2;

/// Core save/advance loop, generic over the stepping function so the
/// truncation policy is testable without running the solver to blow-up.
fn run_trajectory(
    initial: State2D,
    n_steps: u32,
    mut advance: impl FnMut(&State2D) -> Result<State2D, SolverError>,
) -> Result<(Vec<State2D>, bool), ScenarioError> {
    let mut states = Vec::with_capacity(n_steps as usize + 1);
    states.push(initial);
    for _ in 0..n_steps {
        match advance(states.last().expect("states never empty")) {
            Ok(next) => states.push(next),
            Err(SolverError::Unstable { .. }) => {
                let n_saved = states.len();
                if n_saved < TRUNCATE_TAIL + MIN_SAVED {
                    return Err(ScenarioError::TooShortAfterTruncation { n_saved });
                }
                states.truncate(n_saved - TRUNCATE_TAIL);
                return Ok((states, true));
            }
            Err(other) => return Err(other.into()),
        }
    }
    Ok((states, false))
}

/// Builds the initial condition for `specs` and advances it `n_steps` output
/// intervals, saving every state. An unstable run is truncated by ten saved
/// states; if fewer than two remain the whole trajectory is rejected.
pub fn generate_trajectory(
    solver: &EulerSolver,
    specs: &[BubbleSpec],
    config: &ScenarioConfig,
) -> Result<TrajectoryRecord, ScenarioError> {
    config.validate()?;
    let initial = apply_perturbation(
        &solver.hydrostatic_background(),
        specs,
        solver.grid(),
        solver.consts(),
    )?;
    let (states, truncated) = run_trajectory(initial, config.n_steps, |s| {
        solver.advance_output_interval(s, config.output_interval, config.cfl)
    })?;
    Ok(TrajectoryRecord {
        specs: specs.to_vec(),
        states,
        truncated,
    })
}

/// Splits `n` trajectories into train/validation index lists by trajectory.
///
/// The boundary is round(n * ratio) clamped to [1, n-1], so both splits are
/// always non-empty; the first block is the training set.
pub fn split_dataset(n: usize, ratio: f64) -> Result<(Vec<usize>, Vec<usize>), ScenarioError> {
    if n < 2 {
        return Err(ScenarioError::InvalidConfig(format!(
            "need at least 2 trajectories to split, got {n}"
        )));
    }
    if !(ratio.is_finite() && (0.0..=1.0).contains(&ratio)) {
        return Err(ScenarioError::InvalidConfig(format!(
            "split ratio must lie in [0, 1], got {ratio}"
        )));
    }
    let n_train = ((n as f64 * ratio).round() as usize).clamp(1, n - 1);
    Ok(((0..n_train).collect(), (n_train..n).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn solver_32() -> EulerSolver {
        let grid = Grid2D::new(32, 32, 1000.0, 1000.0).unwrap();
        EulerSolver::new(grid, PhysConstants::default()).unwrap()
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = ScenarioConfig::default();
        let a = sample_scenario(&mut ChaCha8Rng::seed_from_u64(42), &cfg).unwrap();
        let b = sample_scenario(&mut ChaCha8Rng::seed_from_u64(42), &cfg).unwrap();
        assert_eq!(a, b, "same seed must give the same scenario");
        let c = sample_scenario(&mut ChaCha8Rng::seed_from_u64(43), &cfg).unwrap();
        assert_ne!(a, c, "different seeds should differ");
    }

    #[test]
    fn sampled_parameters_stay_in_domain() {
        let cfg = ScenarioConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut hot_ones = 0usize;
        let mut cold_counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let specs = sample_scenario(&mut rng, &cfg).unwrap();
            let hot: Vec<_> = specs.iter().filter(|s| s.kind == BubbleKind::Hot).collect();
            let cold: Vec<_> = specs
                .iter()
                .filter(|s| s.kind == BubbleKind::Cold)
                .collect();
            assert!((1..=2).contains(&hot.len()), "hot count {}", hot.len());
            assert!(cold.len() <= 2, "cold count {}", cold.len());
            if hot.len() == 1 {
                hot_ones += 1;
            }
            cold_counts[cold.len()] += 1;
            for s in &hot {
                assert!(cfg.hot.temperature.contains(s.temperature));
                assert!(cfg.hot.radius.contains(s.radius));
                assert!(cfg.hot.center_x.contains(s.center_x));
                assert!(cfg.hot.center_z.contains(s.center_z));
                assert_eq!(s.stability, 50.0);
            }
            for s in &cold {
                assert!(cfg.cold.temperature.contains(s.temperature));
                assert!(cfg.cold.radius.contains(s.radius));
                assert!(cfg.cold.center_x.contains(s.center_x));
                assert!(cfg.cold.center_z.contains(s.center_z));
                assert_eq!(s.stability, 50.0);
            }
        }
        // Count frequencies within 3 sigma of uniform: p = 1/2 over {1, 2}
        // for hot, p = 1/3 over {0, 1, 2} for cold.
        let hot_freq = hot_ones as f64 / n as f64;
        assert!(
            (hot_freq - 0.5).abs() <= 0.015,
            "hot count 1 frequency {hot_freq}"
        );
        for (k, &cnt) in cold_counts.iter().enumerate() {
            let f = cnt as f64 / n as f64;
            assert!(
                (f - 1.0 / 3.0).abs() <= 0.0142,
                "cold count {k} frequency {f}"
            );
        }
    }

    #[test]
    fn no_bubbles_reproduces_background_bitwise() {
        let solver = solver_32();
        let bg = solver.hydrostatic_background();
        let out = apply_perturbation(&bg, &[], solver.grid(), solver.consts()).unwrap();
        assert_eq!(out, bg);
    }

    #[test]
    fn plateau_peak_anomaly_is_exact() {
        let solver = solver_32();
        let consts = *solver.consts();
        let bg = solver.hydrostatic_background();
        // 303.45 K plateau: anomaly exactly 0.30 K inside the radius.
        let spec = BubbleSpec {
            kind: BubbleKind::Hot,
            temperature: 303.45,
            radius: 50.0,
            stability: 50.0,
            center_x: 500.0,
            center_z: 260.0,
        };
        let out = apply_perturbation(&bg, &[spec], solver.grid(), &consts).unwrap();
        let grid = solver.grid();
        let mut peak = 0.0f64;
        for j in 0..grid.nz {
            for i in 0..grid.nx {
                let theta = out.rho_theta.at(j, i) / out.rho.at(j, i);
                peak = peak.max(theta - consts.theta0);
            }
        }
        assert!(
            (peak - 0.30).abs() < 1e-12,
            "plateau peak anomaly {peak}, expected 0.30"
        );
        assert_eq!(out.rho_u1.max_abs(), 0.0, "momenta must stay zero");
        assert_eq!(out.rho_u3.max_abs(), 0.0, "momenta must stay zero");
        assert_eq!(
            out.rho_theta, bg.rho_theta,
            "rho_theta must be untouched (pressure equilibrium)"
        );
    }

    #[test]
    fn skirt_decays_to_amplitude_over_e() {
        let consts = PhysConstants::default();
        let spec = BubbleSpec {
            kind: BubbleKind::Cold,
            temperature: 302.85,
            radius: 50.0,
            stability: 50.0,
            center_x: 0.0,
            center_z: 0.0,
        };
        let a = spec.amplitude(&consts);
        assert!((a + 0.30).abs() < 1e-12, "cold amplitude {a}");
        // One stability width past the plateau edge: amplitude / e.
        let v = spec.anomaly_at(100.0, &consts);
        assert!(((v - a * (-1.0f64).exp()) / a).abs() < 1e-14);
        // Inside the plateau the anomaly is exactly a.
        assert_eq!(spec.anomaly_at(0.0, &consts), a);
        assert_eq!(spec.anomaly_at(50.0, &consts), a);
    }

    #[test]
    fn absurd_cold_spec_is_rejected() {
        let solver = solver_32();
        let bg = solver.hydrostatic_background();
        let spec = BubbleSpec {
            kind: BubbleKind::Cold,
            temperature: -1000.0,
            radius: 400.0,
            stability: 50.0,
            center_x: 500.0,
            center_z: 500.0,
        };
        assert!(matches!(
            apply_perturbation(&bg, &[spec], solver.grid(), solver.consts()),
            Err(ScenarioError::ThetaNonPositive { .. })
        ));
    }

    #[test]
    fn trajectory_single_step_saves_two_states() {
        let solver = solver_32();
        let cfg = ScenarioConfig {
            n_steps: 1,
            ..ScenarioConfig::default()
        };
        let specs = vec![BubbleSpec {
            kind: BubbleKind::Hot,
            temperature: 303.5,
            radius: 60.0,
            stability: 50.0,
            center_x: 500.0,
            center_z: 200.0,
        }];
        let rec = generate_trajectory(&solver, &specs, &cfg).unwrap();
        assert_eq!(rec.states.len(), 2);
        assert_eq!(rec.states[0].time, 0.0);
        assert_eq!(rec.states[1].time, 5.0);
        assert!(!rec.truncated);
        assert_eq!(rec.specs, specs);
    }

    #[test]
    fn trajectory_generation_is_deterministic() {
        let solver = solver_32();
        let cfg = ScenarioConfig {
            n_steps: 2,
            ..ScenarioConfig::default()
        };
        let specs =
            sample_scenario(&mut ChaCha8Rng::seed_from_u64(3), &cfg).unwrap();
        let a = generate_trajectory(&solver, &specs, &cfg).unwrap();
        let b = generate_trajectory(&solver, &specs, &cfg).unwrap();
        assert_eq!(a, b, "same specs must regenerate bitwise-equal states");
    }

    fn fail_after(k: usize) -> impl FnMut(&State2D) -> Result<State2D, SolverError> {
        // Succeeds k-1 times (so k states are saved counting the initial one),
        // then reports instability.
        let mut calls = 0usize;
        move |s: &State2D| {
            calls += 1;
            if calls <= k - 1 {
                let mut next = s.clone();
                next.time += 5.0;
                Ok(next)
            } else {
                Err(SolverError::Unstable {
                    time: s.time,
                    last_state: Box::new(s.clone()),
                })
            }
        }
    }

    #[test]
    fn truncation_drops_ten_states() {
        let initial = State2D::zeros(4, 4);
        let (states, truncated) = run_trajectory(initial, 215, fail_after(30)).unwrap();
        assert!(truncated);
        assert_eq!(states.len(), 20, "30 saved states minus the 10-state tail");
    }

    #[test]
    fn truncation_keeps_minimum_two_states() {
        let initial = State2D::zeros(4, 4);
        let (states, truncated) = run_trajectory(initial, 215, fail_after(12)).unwrap();
        assert!(truncated);
        assert_eq!(states.len(), 2);
    }

    #[test]
    fn truncation_rejects_too_short_runs() {
        let initial = State2D::zeros(4, 4);
        match run_trajectory(initial, 215, fail_after(11)) {
            Err(ScenarioError::TooShortAfterTruncation { n_saved }) => {
                assert_eq!(n_saved, 11);
            }
            other => panic!("expected rejection, got {:?}", other.map(|(s, t)| (s.len(), t))),
        }
    }

    #[test]
    fn split_follows_rounding_and_clamping() {
        let (tr, va) = split_dataset(10, 0.8).unwrap();
        assert_eq!((tr.len(), va.len()), (8, 2));
        assert_eq!(tr, (0..8).collect::<Vec<_>>());
        assert_eq!(va, vec![8, 9]);

        let (tr, va) = split_dataset(940, 700.0 / 940.0).unwrap();
        assert_eq!((tr.len(), va.len()), (700, 240));

        // Extreme ratios still leave both splits non-empty.
        let (tr, va) = split_dataset(5, 0.0).unwrap();
        assert_eq!((tr.len(), va.len()), (1, 4));
        let (tr, va) = split_dataset(5, 1.0).unwrap();
        assert_eq!((tr.len(), va.len()), (4, 1));

        assert!(split_dataset(1, 0.5).is_err(), "cannot split one trajectory");
    }
}
