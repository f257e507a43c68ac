//! Finite-volume solver for the 2D compressible Euler equations with gravity.
//!
//! Conserved fields per cell: density `rho`, horizontal momentum `rho_u1`,
//! vertical momentum `rho_u3`, and potential-temperature density `rho_theta`.
//! Pressure closes the system through `p = p0 * (R_d * rho_theta / p0)^gamma`.
//!
//! Spatial discretization is cell-centered finite volume with Rusanov (local
//! Lax-Friedrichs) fluxes; time stepping is three-stage strong-stability-
//! preserving Runge-Kutta with a CFL-limited internal step. Walls are
//! reflective (slip) on all four sides. The Rusanov dissipation in the
//! vertical direction acts on deviations from a stored hydrostatic background
//! column, and wall ghost cells extend that column, so the resting isentropic
//! atmosphere is a discrete equilibrium of the scheme rather than merely an
//! approximate one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Physical constants of the dry-air model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysConstants {
    /// Gravitational acceleration, m/s^2.
    pub g: f64,
    /// Specific gas constant of dry air, J/(kg K).
    pub r_d: f64,
    /// Specific heat ratio c_p/c_v.
    pub gamma: f64,
    /// Reference pressure, Pa.
    pub p0: f64,
    /// Specific heat at constant pressure, J/(kg K).
    pub c_p: f64,
    /// Background potential temperature, K.
    pub theta0: f64,
}

impl Default for PhysConstants {
    fn default() -> Self {
        PhysConstants {
            g: 9.81,
            r_d: 287.05,
            gamma: 1.4,
            p0: 1.0e5,
            c_p: 1004.675,
            theta0: 303.15,
        }
    }
}

impl PhysConstants {
    /// Specific heat at constant volume.
    pub fn c_v(&self) -> f64 {
        self.c_p - self.r_d
    }

    /// Checks positivity and the thermodynamic consistency gamma = c_p/c_v.
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.g > 0.0 && self.r_d > 0.0 && self.p0 > 0.0 && self.theta0 > 0.0) {
            return Err(SolverError::InvalidConstants(
                "g, R_d, p0, theta0 must be positive".into(),
            ));
        }
        if !(self.c_p > self.r_d) {
            return Err(SolverError::InvalidConstants("c_p must exceed R_d".into()));
        }
        if !(self.gamma > 1.0 && self.gamma < 2.0) {
            return Err(SolverError::InvalidConstants(
                "gamma must lie in (1, 2)".into(),
            ));
        }
        let derived = self.c_p / (self.c_p - self.r_d);
        if ((self.gamma - derived) / derived).abs() > 1e-12 {
            return Err(SolverError::InvalidConstants(format!(
                "gamma {} inconsistent with c_p/(c_p - R_d) = {}",
                self.gamma, derived
            )));
        }
        Ok(())
    }
}

/// Uniform rectangular grid. Cell centers sit at ((i+0.5)dx, (j+0.5)dz).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub nx: usize,
    pub nz: usize,
    pub lx: f64,
    pub lz: f64,
}

impl Grid2D {
    pub fn new(nx: usize, nz: usize, lx: f64, lz: f64) -> Result<Self, SolverError> {
        if nx < 4 || nz < 4 {
            return Err(SolverError::InvalidGrid(format!(
                "need nx >= 4 and nz >= 4, got {nx} x {nz}"
            )));
        }
        if !(lx > 0.0 && lz > 0.0) || !lx.is_finite() || !lz.is_finite() {
            return Err(SolverError::InvalidGrid(format!(
                "domain extents must be positive and finite, got {lx} x {lz}"
            )));
        }
        Ok(Grid2D { nx, nz, lx, lz })
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn dz(&self) -> f64 {
        self.lz / self.nz as f64
    }

    pub fn x_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx()
    }

    pub fn z_center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.dz()
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.nz
    }
}

/// Dense 2D scalar field, row-major with the z index (row) outermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field2D {
    nz: usize,
    nx: usize,
    data: Vec<f64>,
}

impl Field2D {
    pub fn zeros(nz: usize, nx: usize) -> Self {
        Field2D {
            nz,
            nx,
            data: vec![0.0; nz * nx],
        }
    }

    pub fn from_vec(nz: usize, nx: usize, data: Vec<f64>) -> Result<Self, SolverError> {
        if data.len() != nz * nx {
            return Err(SolverError::ShapeMismatch {
                context: "Field2D::from_vec",
                expected: (nz, nx),
                got: (data.len(), 1),
            });
        }
        Ok(Field2D { nz, nx, data })
    }

    pub fn from_fn(nz: usize, nx: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(nz * nx);
        for j in 0..nz {
            for i in 0..nx {
                data.push(f(j, i));
            }
        }
        Field2D { nz, nx, data }
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nz, self.nx)
    }

    #[inline]
    pub fn at(&self, j: usize, i: usize) -> f64 {
        self.data[j * self.nx + i]
    }

    #[inline]
    pub fn set(&mut self, j: usize, i: usize, v: f64) {
        self.data[j * self.nx + i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Reverses the x axis of every row.
    pub fn mirror_x(&self) -> Field2D {
        let mut out = self.clone();
        for j in 0..self.nz {
            out.data[j * self.nx..(j + 1) * self.nx].reverse();
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// The four conserved fields plus the simulation clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State2D {
    pub rho: Field2D,
    pub rho_u1: Field2D,
    pub rho_u3: Field2D,
    pub rho_theta: Field2D,
    pub time: f64,
}

impl State2D {
    pub fn zeros(nz: usize, nx: usize) -> Self {
        State2D {
            rho: Field2D::zeros(nz, nx),
            rho_u1: Field2D::zeros(nz, nx),
            rho_u3: Field2D::zeros(nz, nx),
            rho_theta: Field2D::zeros(nz, nx),
            time: 0.0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.rho.shape()
    }

    /// Total mass sum(rho) * dx * dz.
    pub fn total_mass(&self, grid: &Grid2D) -> f64 {
        self.rho.sum() * grid.dx() * grid.dz()
    }

    /// Physics-preserving mirror about x = lx/2: all fields reverse in x and
    /// the horizontal momentum changes sign.
    pub fn mirror_x(&self) -> State2D {
        let mut ru1 = self.rho_u1.mirror_x();
        for v in ru1.data_mut() {
            *v = -*v;
        }
        State2D {
            rho: self.rho.mirror_x(),
            rho_u1: ru1,
            rho_u3: self.rho_u3.mirror_x(),
            rho_theta: self.rho_theta.mirror_x(),
            time: self.time,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rho.is_finite()
            && self.rho_u1.is_finite()
            && self.rho_u3.is_finite()
            && self.rho_theta.is_finite()
    }

    /// First positivity/finiteness violation, if any, as (field, j, i, value).
    fn first_violation(&self) -> Option<(&'static str, usize, usize, f64)> {
        let (nz, nx) = self.shape();
        let checks: [(&'static str, &Field2D, bool); 4] = [
            ("rho", &self.rho, true),
            ("rho_theta", &self.rho_theta, true),
            ("rho_u1", &self.rho_u1, false),
            ("rho_u3", &self.rho_u3, false),
        ];
        for (name, field, positive) in checks {
            for j in 0..nz {
                for i in 0..nx {
                    let v = field.at(j, i);
                    if !v.is_finite() || (positive && v <= 0.0) {
                        return Some((name, j, i, v));
                    }
                }
            }
        }
        None
    }
}

/// Time derivatives of the conserved fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Tendency {
    pub d_rho: Field2D,
    pub d_rho_u1: Field2D,
    pub d_rho_u3: Field2D,
    pub d_rho_theta: Field2D,
}

impl Tendency {
    fn zeros(nz: usize, nx: usize) -> Self {
        Tendency {
            d_rho: Field2D::zeros(nz, nx),
            d_rho_u1: Field2D::zeros(nz, nx),
            d_rho_u3: Field2D::zeros(nz, nx),
            d_rho_theta: Field2D::zeros(nz, nx),
        }
    }
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid constants: {0}")]
    InvalidConstants(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("{context}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("non-physical {field} = {value} at cell (j = {j}, i = {i})")]
    NonPhysical {
        field: &'static str,
        j: usize,
        i: usize,
        value: f64,
    },
    #[error("invalid state at t = {time}: {field} = {value} at cell (j = {j}, i = {i})")]
    StateInvalid {
        time: f64,
        field: &'static str,
        j: usize,
        i: usize,
        value: f64,
    },
    #[error("Exner function non-positive at z = {z} m; domain too tall for theta0")]
    ExnerNonPositive { z: f64 },
    #[error("solver unstable at t = {time}")]
    Unstable {
        time: f64,
        last_state: Box<State2D>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Pressure from the equation of state, p = p0 * (R_d * rho_theta / p0)^gamma.
pub fn equation_of_state(
    rho_theta: &Field2D,
    consts: &PhysConstants,
) -> Result<Field2D, SolverError> {
    let (nz, nx) = rho_theta.shape();
    let mut out = Field2D::zeros(nz, nx);
    for j in 0..nz {
        for i in 0..nx {
            let rt = rho_theta.at(j, i);
            if !rt.is_finite() || rt <= 0.0 {
                return Err(SolverError::NonPhysical {
                    field: "rho_theta",
                    j,
                    i,
                    value: rt,
                });
            }
            out.set(j, i, pressure(rt, consts));
        }
    }
    Ok(out)
}

#[inline]
fn pressure(rho_theta: f64, consts: &PhysConstants) -> f64 {
    consts.p0 * (consts.r_d * rho_theta / consts.p0).powf(consts.gamma)
}

/// Inverse of the equation of state: rho_theta such that pressure(rho_theta) = p.
#[inline]
fn rho_theta_of_pressure(p: f64, consts: &PhysConstants) -> f64 {
    (consts.p0 / consts.r_d) * (p / consts.p0).powf(1.0 / consts.gamma)
}

/// Closed-form dry isentropic hydrostatic profile at height z: (rho, p).
///
/// Exner function pi(z) = 1 - g z / (c_p theta0); p = p0 pi^(c_p/R_d);
/// rho = p / (R_d theta0 pi).
pub fn isentropic_profile(z: f64, consts: &PhysConstants) -> Result<(f64, f64), SolverError> {
    let pi = 1.0 - consts.g * z / (consts.c_p * consts.theta0);
    if pi <= 0.0 {
        return Err(SolverError::ExnerNonPositive { z });
    }
    let p = consts.p0 * pi.powf(consts.c_p / consts.r_d);
    let rho = p / (consts.r_d * consts.theta0 * pi);
    Ok((rho, p))
}

/// Horizontal boundary treatment. Vertical walls are always reflective;
/// the periodic option exists for translation-invariance tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum XBoundary {
    Reflective,
    Periodic,
}

/// One cell's values as seen by the flux routines. `pert_rho`/`pert_rt` are
/// deviations from the background column; ghost cells copy them verbatim so
/// wall dissipation vanishes exactly for wall-symmetric fields.
#[derive(Clone, Copy)]
struct CellVals {
    ru1: f64,
    ru3: f64,
    rt: f64,
    u1: f64,
    u3: f64,
    p: f64,
    c: f64,
    pert_rho: f64,
    pert_rt: f64,
}

pub struct EulerSolver {
    grid: Grid2D,
    consts: PhysConstants,
    x_boundary: XBoundary,
    /// Background column over rows -1..=nz; index j+1 addresses interior row j.
    bg_rho: Vec<f64>,
    bg_rho_theta: Vec<f64>,
    bg_p: Vec<f64>,
}

impl EulerSolver {
    /// Builds a solver and its discretely balanced background column.
    ///
    /// The column (one ghost row below, one above) is anchored at the analytic
    /// Exner profile in the two bottom rows and marched upward with the
    /// midpoint rule p[j+1] = p[j-1] - 2 g dz rho[j], which makes the discrete
    /// vertical momentum residual of the resting state vanish to round-off.
    pub fn new(grid: Grid2D, consts: PhysConstants) -> Result<Self, SolverError> {
        consts.validate()?;
        let dz = grid.dz();
        let n = grid.nz + 2;
        let mut bg_p = vec![0.0; n];
        let mut bg_rho_theta = vec![0.0; n];
        let mut bg_rho = vec![0.0; n];

        // Reject configurations where the analytic profile degenerates
        // anywhere in the column, ghost rows included.
        let z_top_ghost = grid.lz + 0.5 * dz;
        isentropic_profile(z_top_ghost, &consts)?;

        for (k, z) in [(-0.5 * dz), (0.5 * dz)].into_iter().enumerate() {
            let (_, p) = isentropic_profile(z, &consts)?;
            bg_rho_theta[k] = rho_theta_of_pressure(p, &consts);
            bg_p[k] = pressure(bg_rho_theta[k], &consts);
            bg_rho[k] = bg_rho_theta[k] / consts.theta0;
        }
        for k in 1..n - 1 {
            let p_next = bg_p[k - 1] - 2.0 * consts.g * dz * bg_rho[k];
            if !(p_next > 0.0) || !p_next.is_finite() {
                return Err(SolverError::ExnerNonPositive {
                    z: (k as f64 + 0.5) * dz,
                });
            }
            bg_rho_theta[k + 1] = rho_theta_of_pressure(p_next, &consts);
            bg_p[k + 1] = pressure(bg_rho_theta[k + 1], &consts);
            bg_rho[k + 1] = bg_rho_theta[k + 1] / consts.theta0;
        }

        Ok(EulerSolver {
            grid,
            consts,
            x_boundary: XBoundary::Reflective,
            bg_rho,
            bg_rho_theta,
            bg_p,
        })
    }

    pub fn with_x_boundary(mut self, b: XBoundary) -> Self {
        self.x_boundary = b;
        self
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn consts(&self) -> &PhysConstants {
        &self.consts
    }

    /// Background values (rho, rho_theta, p) of interior row j.
    pub fn background_row(&self, j: usize) -> (f64, f64, f64) {
        (
            self.bg_rho[j + 1],
            self.bg_rho_theta[j + 1],
            self.bg_p[j + 1],
        )
    }

    /// The motionless, discretely balanced background state at t = 0.
    pub fn hydrostatic_background(&self) -> State2D {
        let (nz, nx) = (self.grid.nz, self.grid.nx);
        let mut state = State2D::zeros(nz, nx);
        for j in 0..nz {
            for i in 0..nx {
                state.rho.set(j, i, self.bg_rho[j + 1]);
                state.rho_theta.set(j, i, self.bg_rho_theta[j + 1]);
            }
        }
        state
    }

    fn check_shape(&self, state: &State2D, context: &'static str) -> Result<(), SolverError> {
        let expected = (self.grid.nz, self.grid.nx);
        for f in [
            &state.rho,
            &state.rho_u1,
            &state.rho_u3,
            &state.rho_theta,
        ] {
            if f.shape() != expected {
                return Err(SolverError::ShapeMismatch {
                    context,
                    expected,
                    got: f.shape(),
                });
            }
        }
        Ok(())
    }

    fn check_physical(&self, state: &State2D) -> Result<(), SolverError> {
        if let Some((field, j, i, value)) = state.first_violation() {
            return Err(SolverError::StateInvalid {
                time: state.time,
                field,
                j,
                i,
                value,
            });
        }
        Ok(())
    }

    fn cell_vals(&self, state: &State2D, j: usize, i: usize) -> CellVals {
        let rho = state.rho.at(j, i);
        let ru1 = state.rho_u1.at(j, i);
        let ru3 = state.rho_u3.at(j, i);
        let rt = state.rho_theta.at(j, i);
        let p = pressure(rt, &self.consts);
        CellVals {
            ru1,
            ru3,
            rt,
            u1: ru1 / rho,
            u3: ru3 / rho,
            p,
            c: (self.consts.gamma * p / rho).sqrt(),
            pert_rho: rho - self.bg_rho[j + 1],
            pert_rt: rt - self.bg_rho_theta[j + 1],
        }
    }

    /// Mirror of `inner` through a vertical wall (x-normal).
    fn ghost_x(inner: CellVals) -> CellVals {
        CellVals {
            ru1: -inner.ru1,
            u1: -inner.u1,
            ..inner
        }
    }

    /// Ghost below/above a horizontal wall: background extension of row
    /// `ghost_row` (0 = below domain, nz+1 = above) plus the mirrored
    /// perturbation of `inner`, with the normal momentum reversed.
    fn ghost_z(&self, inner: CellVals, ghost_row: usize) -> CellVals {
        let rho = self.bg_rho[ghost_row] + inner.pert_rho;
        let rt = self.bg_rho_theta[ghost_row] + inner.pert_rt;
        let ru1 = inner.ru1;
        let ru3 = -inner.ru3;
        let p = pressure(rt, &self.consts);
        CellVals {
            ru1,
            ru3,
            rt,
            u1: ru1 / rho,
            u3: ru3 / rho,
            p,
            c: (self.consts.gamma * p / rho).sqrt(),
            pert_rho: inner.pert_rho,
            pert_rt: inner.pert_rt,
        }
    }

    /// Rusanov flux through an x-normal face between left and right cells.
    #[inline]
    fn flux_x(l: CellVals, r: CellVals) -> [f64; 4] {
        let lam = (l.u1.abs() + l.c).max(r.u1.abs() + r.c);
        [
            0.5 * (l.ru1 + r.ru1) - 0.5 * lam * (r.pert_rho - l.pert_rho),
            0.5 * (l.ru1 * l.u1 + l.p + r.ru1 * r.u1 + r.p) - 0.5 * lam * (r.ru1 - l.ru1),
            0.5 * (l.ru3 * l.u1 + r.ru3 * r.u1) - 0.5 * lam * (r.ru3 - l.ru3),
            0.5 * (l.rt * l.u1 + r.rt * r.u1) - 0.5 * lam * (r.pert_rt - l.pert_rt),
        ]
    }

    /// Rusanov flux through a z-normal face between bottom and top cells.
    #[inline]
    fn flux_z(b: CellVals, t: CellVals) -> [f64; 4] {
        let lam = (b.u3.abs() + b.c).max(t.u3.abs() + t.c);
        [
            0.5 * (b.ru3 + t.ru3) - 0.5 * lam * (t.pert_rho - b.pert_rho),
            0.5 * (b.ru1 * b.u3 + t.ru1 * t.u3) - 0.5 * lam * (t.ru1 - b.ru1),
            0.5 * (b.ru3 * b.u3 + b.p + t.ru3 * t.u3 + t.p) - 0.5 * lam * (t.ru3 - b.ru3),
            0.5 * (b.rt * b.u3 + t.rt * t.u3) - 0.5 * lam * (t.pert_rt - b.pert_rt),
        ]
    }

    /// Negated flux divergence of the conserved fields plus the gravity
    /// source -rho g in the vertical momentum component.
    pub fn compute_rhs(&self, state: &State2D) -> Result<Tendency, SolverError> {
        self.check_shape(state, "compute_rhs")?;
        self.check_physical(state)?;
        let (nz, nx) = (self.grid.nz, self.grid.nx);
        let (dx, dz) = (self.grid.dx(), self.grid.dz());
        let mut tend = Tendency::zeros(nz, nx);

        let cells: Vec<CellVals> = (0..nz)
            .flat_map(|j| (0..nx).map(move |i| (j, i)))
            .map(|(j, i)| self.cell_vals(state, j, i))
            .collect();

        // x-direction sweeps.
        for j in 0..nz {
            let row = j * nx;
            for face in 0..=nx {
                let (l, r) = match (face, self.x_boundary) {
                    (0, XBoundary::Reflective) => (Self::ghost_x(cells[row]), cells[row]),
                    (0, XBoundary::Periodic) => (cells[row + nx - 1], cells[row]),
                    (f, XBoundary::Reflective) if f == nx => {
                        (cells[row + nx - 1], Self::ghost_x(cells[row + nx - 1]))
                    }
                    (f, XBoundary::Periodic) if f == nx => (cells[row + nx - 1], cells[row]),
                    (f, _) => (cells[row + f - 1], cells[row + f]),
                };
                let fl = Self::flux_x(l, r);
                if face > 0 {
                    let c = row + face - 1;
                    tend.d_rho.data_mut()[c] -= fl[0] / dx;
                    tend.d_rho_u1.data_mut()[c] -= fl[1] / dx;
                    tend.d_rho_u3.data_mut()[c] -= fl[2] / dx;
                    tend.d_rho_theta.data_mut()[c] -= fl[3] / dx;
                }
                if face < nx {
                    let c = row + face;
                    tend.d_rho.data_mut()[c] += fl[0] / dx;
                    tend.d_rho_u1.data_mut()[c] += fl[1] / dx;
                    tend.d_rho_u3.data_mut()[c] += fl[2] / dx;
                    tend.d_rho_theta.data_mut()[c] += fl[3] / dx;
                }
            }
        }

        // z-direction sweeps.
        for i in 0..nx {
            for face in 0..=nz {
                let (b, t) = if face == 0 {
                    (self.ghost_z(cells[i], 0), cells[i])
                } else if face == nz {
                    let inner = cells[(nz - 1) * nx + i];
                    (inner, self.ghost_z(inner, nz + 1))
                } else {
                    (cells[(face - 1) * nx + i], cells[face * nx + i])
                };
                let fl = Self::flux_z(b, t);
                if face > 0 {
                    let c = (face - 1) * nx + i;
                    tend.d_rho.data_mut()[c] -= fl[0] / dz;
                    tend.d_rho_u1.data_mut()[c] -= fl[1] / dz;
                    tend.d_rho_u3.data_mut()[c] -= fl[2] / dz;
                    tend.d_rho_theta.data_mut()[c] -= fl[3] / dz;
                }
                if face < nz {
                    let c = face * nx + i;
                    tend.d_rho.data_mut()[c] += fl[0] / dz;
                    tend.d_rho_u1.data_mut()[c] += fl[1] / dz;
                    tend.d_rho_u3.data_mut()[c] += fl[2] / dz;
                    tend.d_rho_theta.data_mut()[c] += fl[3] / dz;
                }
            }
        }

        // Gravity source.
        for (c, v) in tend.d_rho_u3.data_mut().iter_mut().enumerate() {
            *v -= state.rho.data()[c] * self.consts.g;
        }

        Ok(tend)
    }

    /// Max over cells of |u| + c in either direction, c = sqrt(gamma p / rho).
    pub fn max_wavespeed(&self, state: &State2D) -> Result<f64, SolverError> {
        self.check_shape(state, "max_wavespeed")?;
        self.check_physical(state)?;
        let mut s = 0.0f64;
        let n = state.rho.data().len();
        for c in 0..n {
            let rho = state.rho.data()[c];
            let u1 = state.rho_u1.data()[c] / rho;
            let u3 = state.rho_u3.data()[c] / rho;
            let p = pressure(state.rho_theta.data()[c], &self.consts);
            let cs = (self.consts.gamma * p / rho).sqrt();
            s = s.max(u1.abs().max(u3.abs()) + cs);
        }
        if !s.is_finite() {
            return Err(SolverError::StateInvalid {
                time: state.time,
                field: "wavespeed",
                j: 0,
                i: 0,
                value: s,
            });
        }
        Ok(s)
    }

    /// CFL-limited internal step size for the given state.
    pub fn cfl_dt(&self, state: &State2D, cfl: f64) -> Result<f64, SolverError> {
        if !(cfl > 0.0 && cfl <= 1.0) {
            return Err(SolverError::InvalidArgument(format!(
                "cfl must lie in (0, 1], got {cfl}"
            )));
        }
        let s = self.max_wavespeed(state)?;
        Ok(cfl * self.grid.dx().min(self.grid.dz()) / s)
    }

    /// One three-stage strong-stability-preserving Runge-Kutta step.
    pub fn step_ssprk3(&self, state: &State2D, dt: f64) -> Result<State2D, SolverError> {
        if dt == 0.0 {
            return Ok(state.clone());
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(SolverError::InvalidArgument(format!(
                "dt must be non-negative and finite, got {dt}"
            )));
        }
        // Stage 1: u1 = u + dt L(u)
        let k = self.compute_rhs(state)?;
        let s1 = lincomb(1.0, state, 0.0, state, dt, &k);
        // Stage 2: u2 = 3/4 u + 1/4 u1 + 1/4 dt L(u1)
        let k = self.compute_rhs(&s1)?;
        let s2 = lincomb(0.75, state, 0.25, &s1, 0.25 * dt, &k);
        // Stage 3: u_new = 1/3 u + 2/3 u2 + 2/3 dt L(u2)
        let k = self.compute_rhs(&s2)?;
        let mut out = lincomb(1.0 / 3.0, state, 2.0 / 3.0, &s2, 2.0 / 3.0 * dt, &k);
        out.time = state.time + dt;
        Ok(out)
    }

    /// Advances by exactly `interval` seconds using CFL-limited substeps.
    ///
    /// The 5 s cadence of saved states is this output interval; internal
    /// steps are much shorter. On instability the error carries the last
    /// finite state and the failure time.
    pub fn advance_output_interval(
        &self,
        state: &State2D,
        interval: f64,
        cfl: f64,
    ) -> Result<State2D, SolverError> {
        if !(interval > 0.0) || !interval.is_finite() {
            return Err(SolverError::InvalidArgument(format!(
                "interval must be positive, got {interval}"
            )));
        }
        let target = state.time + interval;
        let mut current = state.clone();
        loop {
            let remaining = target - current.time;
            if remaining <= 0.0 {
                current.time = target;
                return Ok(current);
            }
            let dt_cfl = match self.cfl_dt(&current, cfl) {
                Ok(v) => v,
                Err(SolverError::InvalidArgument(msg)) => {
                    return Err(SolverError::InvalidArgument(msg))
                }
                Err(_) => {
                    let time = current.time;
                    return Err(SolverError::Unstable {
                        time,
                        last_state: Box::new(current),
                    });
                }
            };
            if !dt_cfl.is_finite() || dt_cfl <= interval * 1e-12 {
                let time = current.time;
                return Err(SolverError::Unstable {
                    time,
                    last_state: Box::new(current),
                });
            }
            let last_substep = dt_cfl >= remaining;
            let dt = if last_substep { remaining } else { dt_cfl };
            match self.step_ssprk3(&current, dt) {
                Ok(next) if next.is_finite() => {
                    current = next;
                    if last_substep {
                        current.time = target;
                        return Ok(current);
                    }
                }
                _ => {
                    let time = current.time;
                    return Err(SolverError::Unstable {
                        time,
                        last_state: Box::new(current),
                    });
                }
            }
        }
    }
}

/// Elementwise a*x + b*y + c*t over all four conserved fields.
fn lincomb(a: f64, x: &State2D, b: f64, y: &State2D, c: f64, t: &Tendency) -> State2D {
    let (nz, nx) = x.shape();
    let mut out = State2D::zeros(nz, nx);
    let fields = [
        (&x.rho, &y.rho, &t.d_rho, &mut out.rho),
        (&x.rho_u1, &y.rho_u1, &t.d_rho_u1, &mut out.rho_u1),
        (&x.rho_u3, &y.rho_u3, &t.d_rho_u3, &mut out.rho_u3),
        (
            &x.rho_theta,
            &y.rho_theta,
            &t.d_rho_theta,
            &mut out.rho_theta,
        ),
    ];
    for (fx, fy, ft, fo) in fields {
        let (dx, dy, dt_) = (fx.data(), fy.data(), ft.data());
        for (c_idx, o) in fo.data_mut().iter_mut().enumerate() {
            *o = a * dx[c_idx] + b * dy[c_idx] + c * dt_[c_idx];
        }
    }
    out.time = x.time;
    out
}
