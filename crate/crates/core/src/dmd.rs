//! Dynamic mode decomposition: a linear surrogate for trajectory dynamics.
//!
//! A trajectory is flattened into snapshot columns; the best-fit linear map
//! between consecutive snapshots is analysed through its rank-truncated SVD,
//! yielding eigenvalues, spatial modes, and amplitudes that advance any
//! initial state with nothing but scalar powers.

use crate::linalg::{self, complexify, spectral_order, C64, LinalgError};
use crate::pipeline::{normalize, transform_variables, NormStats, Variable};
use crate::scenario::TrajectoryRecord;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Singular values below this fraction of the largest are treated as noise
/// when no explicit rank is requested.
pub const DEFAULT_RANK_CUTOFF: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DmdError {
    #[error("need at least two states to form snapshot pairs, got {0}")]
    TooFewStates(usize),
    #[error("snapshot matrices disagree: X is {x_rows}x{x_cols}, X' is {xp_rows}x{xp_cols}")]
    ShapeMismatch {
        x_rows: usize,
        x_cols: usize,
        xp_rows: usize,
        xp_cols: usize,
    },
    #[error("snapshot matrix is identically zero")]
    DegenerateInput,
    #[error("rank {requested} is outside 1..={max}")]
    InvalidRank { requested: usize, max: usize },
    #[error("state has {got} entries but the modes have {expected} rows")]
    StateLengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Paired snapshot matrices: column j of `xp` is the successor of column j
/// of `x`.
#[derive(Debug, Clone)]
pub struct SnapshotMatrix {
    pub x: DMatrix<f64>,
    pub xp: DMatrix<f64>,
}

impl SnapshotMatrix {
    pub fn new(x: DMatrix<f64>, xp: DMatrix<f64>) -> Result<Self, DmdError> {
        if x.shape() != xp.shape() {
            return Err(DmdError::ShapeMismatch {
                x_rows: x.nrows(),
                x_cols: x.ncols(),
                xp_rows: xp.nrows(),
                xp_cols: xp.ncols(),
            });
        }
        Ok(SnapshotMatrix { x, xp })
    }
}

/// Flattens one normalized variable of every saved state into snapshot
/// columns. A trajectory of n states yields n-1 column pairs.
pub fn build_snapshots(
    trajectory: &TrajectoryRecord,
    variable: Variable,
    stats: &NormStats,
) -> Result<SnapshotMatrix, DmdError> {
    let n_states = trajectory.states.len();
    if n_states < 2 {
        return Err(DmdError::TooFewStates(n_states));
    }
    let columns: Vec<DVector<f64>> = trajectory
        .states
        .iter()
        .map(|state| {
            let fields = normalize(&transform_variables(state), stats);
            DVector::from_column_slice(fields.field(variable).data())
        })
        .collect();
    let x = DMatrix::from_columns(&columns[..n_states - 1]);
    let xp = DMatrix::from_columns(&columns[1..]);
    Ok(SnapshotMatrix { x, xp })
}

/// Rank-truncated decomposition of the linear map taking `x` to `xp`.
#[derive(Debug, Clone)]
pub struct DmdResult {
    /// Retained rank r.
    pub rank: usize,
    /// Full singular-value spectrum of X, descending.
    pub singular_values: Vec<f64>,
    /// The r x r projected operator.
    pub a_tilde: DMatrix<f64>,
    /// Eigenvalues, descending modulus then ascending angle.
    pub eigenvalues: Vec<C64>,
    /// Spatial modes, one column per eigenvalue.
    pub modes: DMatrix<C64>,
    /// Mode amplitudes fitted to the first snapshot.
    pub amplitudes: DVector<C64>,
}

/// Fits the decomposition. With `rank` unset, all singular values above
/// [`DEFAULT_RANK_CUTOFF`] relative to the largest are kept; an explicit
/// rank is capped at the number of nonzero singular values so the inverted
/// spectrum stays finite.
pub fn fit_dmd(snapshots: &SnapshotMatrix, rank: Option<usize>) -> Result<DmdResult, DmdError> {
    let x = &snapshots.x;
    let xp = &snapshots.xp;
    if x.shape() != xp.shape() {
        return Err(DmdError::ShapeMismatch {
            x_rows: x.nrows(),
            x_cols: x.ncols(),
            xp_rows: xp.nrows(),
            xp_cols: xp.ncols(),
        });
    }
    let max_rank = x.nrows().min(x.ncols());
    if x.is_empty() || x.amax() == 0.0 {
        return Err(DmdError::DegenerateInput);
    }
    if let Some(r) = rank {
        if r == 0 || r > max_rank {
            return Err(DmdError::InvalidRank {
                requested: r,
                max: max_rank,
            });
        }
    }

    let (u, s, v) = linalg::thin_svd(x)?;
    let s_max = s[0];
    if s_max <= 0.0 {
        return Err(DmdError::DegenerateInput);
    }
    let nonzero = s.iter().filter(|&&sv| sv > DEFAULT_RANK_CUTOFF * s_max).count();
    let r = match rank {
        None => nonzero,
        Some(requested) => requested.min(nonzero),
    };

    let u_r = u.columns(0, r).into_owned();
    let v_r = v.columns(0, r).into_owned();
    let sigma_inv = DMatrix::from_diagonal(&DVector::from_fn(r, |i, _| 1.0 / s[i]));

    // Image of the truncated right singular space under the one-step map.
    let proj = xp * &v_r * &sigma_inv;
    let a_tilde = u_r.transpose() * &proj;

    let (eigenvalues, w) = linalg::complex_eigen(&a_tilde)?;
    let modes = complexify(&proj) * &w;

    let first = DVector::from_fn(x.nrows(), |i, _| C64::new(x[(i, 0)], 0.0));
    let amplitudes = linalg::lstsq_complex(&modes, &first)?;

    Ok(DmdResult {
        rank: r,
        singular_values: s.iter().copied().collect(),
        a_tilde,
        eigenvalues,
        modes,
        amplitudes,
    })
}

/// Advances `x0` for `steps` steps by refitting amplitudes to `x0` and
/// scaling each mode by powers of its eigenvalue. Returns the real parts of
/// states 0..=steps together with the largest imaginary component that was
/// discarded.
pub fn dmd_predict(
    result: &DmdResult,
    x0: &DVector<f64>,
    steps: usize,
) -> Result<(Vec<DVector<f64>>, f64), DmdError> {
    let n = result.modes.nrows();
    if x0.len() != n {
        return Err(DmdError::StateLengthMismatch {
            expected: n,
            got: x0.len(),
        });
    }
    let x0_c = DVector::from_fn(n, |i, _| C64::new(x0[i], 0.0));
    let b = linalg::lstsq_complex(&result.modes, &x0_c)?;

    let r = result.rank;
    let mut lambda_pow = vec![C64::new(1.0, 0.0); r];
    let mut states = Vec::with_capacity(steps + 1);
    let mut max_imag: f64 = 0.0;
    for _ in 0..=steps {
        let coeff = DVector::from_fn(r, |i, _| b[i] * lambda_pow[i]);
        let y = &result.modes * coeff;
        for entry in y.iter() {
            max_imag = max_imag.max(entry.im.abs());
        }
        states.push(DVector::from_fn(n, |i, _| y[i].re));
        for (p, lambda) in lambda_pow.iter_mut().zip(&result.eigenvalues) {
            *p *= lambda;
        }
    }
    Ok((states, max_imag))
}

/// Frobenius norm of X' minus the one-step advance of X through the fitted
/// modes; decreases (weakly) as retained rank grows.
pub fn reconstruction_residual(
    result: &DmdResult,
    snapshots: &SnapshotMatrix,
) -> Result<f64, DmdError> {
    let x = &snapshots.x;
    let xp = &snapshots.xp;
    if x.nrows() != result.modes.nrows() {
        return Err(DmdError::StateLengthMismatch {
            expected: result.modes.nrows(),
            got: x.nrows(),
        });
    }
    let mut sum_sq = 0.0;
    for j in 0..x.ncols() {
        let col = DVector::from_fn(x.nrows(), |i, _| C64::new(x[(i, j)], 0.0));
        let b = linalg::lstsq_complex(&result.modes, &col)?;
        let coeff = DVector::from_fn(result.rank, |i, _| b[i] * result.eigenvalues[i]);
        let pred = &result.modes * coeff;
        for i in 0..x.nrows() {
            sum_sq += (C64::new(xp[(i, j)], 0.0) - pred[i]).norm_sqr();
        }
    }
    Ok(sum_sq.sqrt())
}

/// Sorts a spectrum into the canonical comparison order used by
/// [`fit_dmd`]: descending modulus, then ascending angle.
pub fn sort_spectrum(values: &mut [C64]) {
    values.sort_by(spectral_order);
}
