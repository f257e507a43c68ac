//! Dense linear algebra helpers: deterministically ordered thin SVD,
//! complex eigenpairs of real matrices, and complex least squares.
//!
//! Eigenvalues come from the real Schur form; eigenvectors are recovered by
//! shifted inverse iteration with fixed starting vectors, then phase-fixed
//! so repeated runs produce identical output.

use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

pub type C64 = Complex<f64>;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("SVD failed to converge")]
    SvdFailed,
    #[error("eigenvector iteration failed to converge for eigenvalue {0}")]
    EigenvectorFailed(C64),
    #[error("singular system in least-squares solve")]
    SingularSystem,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Thin SVD A = U diag(s) V^T with singular values in descending order.
pub fn thin_svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>), LinalgError> {
    let svd = a.clone().try_svd(true, true, f64::EPSILON, 0).ok_or(LinalgError::SvdFailed)?;
    let u = svd.u.ok_or(LinalgError::SvdFailed)?;
    let v_t = svd.v_t.ok_or(LinalgError::SvdFailed)?;
    let s = svd.singular_values;

    // Defensive ordering: permute to strictly descending singular values.
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).expect("singular values are finite"));
    let k = s.len();
    let mut u_sorted = DMatrix::zeros(u.nrows(), k);
    let mut v_sorted = DMatrix::zeros(v_t.ncols(), k);
    let mut s_sorted = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        u_sorted.set_column(dst, &u.column(src));
        v_sorted.set_column(dst, &v_t.transpose().column(src));
        s_sorted[dst] = s[src];
    }
    Ok((u_sorted, s_sorted, v_sorted))
}

/// Lifts a real matrix into the complex plane.
pub fn complexify(a: &DMatrix<f64>) -> DMatrix<C64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| C64::new(a[(r, c)], 0.0))
}

/// Deterministic ordering for complex spectra: descending modulus, then
/// ascending principal angle. Conjugate pairs end up adjacent.
pub fn spectral_order(a: &C64, b: &C64) -> std::cmp::Ordering {
    b.norm()
        .partial_cmp(&a.norm())
        .expect("finite eigenvalues")
        .then_with(|| a.arg().partial_cmp(&b.arg()).expect("finite angles"))
}

/// Eigenvalues only, ordered by [`spectral_order`]; cheaper than
/// [`complex_eigen`] when eigenvectors are not needed.
pub fn spectrum(a: &DMatrix<f64>) -> Vec<C64> {
    let mut values: Vec<C64> = a.clone().complex_eigenvalues().iter().copied().collect();
    values.sort_by(spectral_order);
    values
}

/// Eigenvalues (Schur) and eigenvectors (shifted inverse iteration) of a
/// real square matrix, ordered by [`spectral_order`]. Columns of the
/// returned matrix are unit-norm with their largest component made real
/// and positive.
///
/// Defective matrices (repeated eigenvalues without a full eigenbasis) are
/// outside this routine's scope and may fail to converge.
pub fn complex_eigen(a: &DMatrix<f64>) -> Result<(Vec<C64>, DMatrix<C64>), LinalgError> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(LinalgError::DimensionMismatch(format!(
            "eigen needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut eigenvalues: Vec<C64> = a.clone().complex_eigenvalues().iter().copied().collect();
    eigenvalues.sort_by(spectral_order);

    let ac = complexify(a);
    let mut vectors = DMatrix::<C64>::zeros(n, n);
    let scale = a.norm().max(1.0);
    for (col, &lambda) in eigenvalues.iter().enumerate() {
        let v = inverse_iteration(&ac, lambda, scale, col)?;
        vectors.set_column(col, &v);
    }
    Ok((eigenvalues, vectors))
}

fn inverse_iteration(
    ac: &DMatrix<C64>,
    lambda: C64,
    scale: f64,
    col_hint: usize,
) -> Result<DVector<C64>, LinalgError> {
    let n = ac.nrows();
    // Perturb the shift slightly off the eigenvalue so the shifted matrix is
    // invertible; the iteration still converges to the nearby eigenvector.
    for attempt in 0..4 {
        let eps = 1e-10 * scale * 10f64.powi(attempt);
        let shift = lambda + C64::new(eps, eps);
        let mut m = ac.clone();
        for d in 0..n {
            m[(d, d)] -= shift;
        }
        let lu = m.lu();
        // Deterministic start: a basis vector keyed to the eigenvalue index,
        // plus a spread component to avoid orthogonal starts.
        let mut v = DVector::from_fn(n, |r, _| {
            C64::new(if r == col_hint % n { 1.0 } else { 0.1 + 0.01 * r as f64 }, 0.0)
        });
        v /= C64::new(v.norm(), 0.0);
        let mut converged = false;
        for _ in 0..50 {
            let Some(next) = lu.solve(&v) else { break };
            let norm = next.norm();
            if !norm.is_finite() || norm == 0.0 {
                break;
            }
            let next = next / C64::new(norm, 0.0);
            let delta = residual(ac, lambda, &next);
            v = next;
            if delta <= 1e-9 * scale {
                converged = true;
                break;
            }
        }
        if converged || residual(ac, lambda, &v) <= 1e-8 * scale {
            return Ok(phase_fix(v));
        }
    }
    Err(LinalgError::EigenvectorFailed(lambda))
}

fn residual(ac: &DMatrix<C64>, lambda: C64, v: &DVector<C64>) -> f64 {
    (ac * v - v * lambda).norm()
}

/// Rotates a unit vector so its largest-modulus entry is real positive.
fn phase_fix(v: DVector<C64>) -> DVector<C64> {
    let mut best = 0usize;
    let mut best_norm = 0.0;
    for (i, x) in v.iter().enumerate() {
        if x.norm() > best_norm {
            best_norm = x.norm();
            best = i;
        }
    }
    if best_norm == 0.0 {
        return v;
    }
    let phase = v[best] / C64::new(best_norm, 0.0);
    v / phase
}

/// Least-squares solution of A x ≈ b through the normal equations; adequate
/// for the small, well-conditioned systems used here.
pub fn lstsq_complex(a: &DMatrix<C64>, b: &DVector<C64>) -> Result<DVector<C64>, LinalgError> {
    if a.nrows() != b.len() {
        return Err(LinalgError::DimensionMismatch(format!(
            "A is {}x{}, b has {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let ah = a.adjoint();
    let gram = &ah * a;
    let rhs = &ah * b;
    gram.lu().solve(&rhs).ok_or(LinalgError::SingularSystem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn svd_reconstructs_and_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_matrix(&mut rng, 6, 4);
        let (u, s, v) = thin_svd(&a).unwrap();
        for w in s.as_slice().windows(2) {
            assert!(w[0] >= w[1], "singular values must descend: {w:?}");
        }
        let rebuilt = &u * DMatrix::from_diagonal(&s) * v.transpose();
        assert!((&rebuilt - &a).norm() < 1e-12 * a.norm(), "U S V^T must equal A");
        // Orthonormal columns.
        let eye_u = u.transpose() * &u;
        assert!((eye_u - DMatrix::identity(4, 4)).norm() < 1e-12);
    }

    #[test]
    fn eigen_symmetric_known_values() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (vals, vecs) = complex_eigen(&a).unwrap();
        assert!((vals[0] - C64::new(3.0, 0.0)).norm() < 1e-12);
        assert!((vals[1] - C64::new(1.0, 0.0)).norm() < 1e-12);
        // Eigenvector for 3 is (1,1)/sqrt(2) up to phase; phase fix makes the
        // larger entry real positive.
        let v0 = vecs.column(0);
        assert!((v0[0].re - v0[1].re).abs() < 1e-9, "symmetric eigenvector");
        assert!(v0[0].im.abs() < 1e-10);
    }

    #[test]
    fn eigen_rotation_gives_conjugate_pair() {
        let (c, s, r) = (0.6f64.cos(), 0.6f64.sin(), 0.9);
        let a = DMatrix::from_row_slice(2, 2, &[r * c, -r * s, r * s, r * c]);
        let (vals, vecs) = complex_eigen(&a).unwrap();
        // 0.9 e^{±0.6i}, ascending angle puts -0.6 first.
        assert!((vals[0] - C64::from_polar(0.9, -0.6)).norm() < 1e-10, "{:?}", vals);
        assert!((vals[1] - C64::from_polar(0.9, 0.6)).norm() < 1e-10);
        for k in 0..2 {
            let v = vecs.column(k).into_owned();
            let ac = complexify(&a);
            assert!(residual(&ac, vals[k], &v) < 1e-9, "eigenpair residual");
        }
    }

    #[test]
    fn eigen_random_matrix_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_matrix(&mut rng, 8, 8);
        let ac = complexify(&a);
        let (vals, vecs) = complex_eigen(&a).unwrap();
        for k in 0..8 {
            let v = vecs.column(k).into_owned();
            assert!((v.norm() - 1.0).abs() < 1e-10, "unit norm");
            let res = residual(&ac, vals[k], &v);
            assert!(res < 1e-8, "eigenpair {k} residual {res}");
        }
        // Conjugate closure of the spectrum of a real matrix.
        for val in &vals {
            let conj_present = vals.iter().any(|w| (w - val.conj()).norm() < 1e-10);
            assert!(conj_present, "conjugate of {val} missing");
        }
    }

    #[test]
    fn eigen_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = random_matrix(&mut rng, 6, 6);
        let (v1, m1) = complex_eigen(&a).unwrap();
        let (v2, m2) = complex_eigen(&a).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(m1, m2, "phase-fixed eigenvectors must be reproducible");
    }

    #[test]
    fn lstsq_square_and_overdetermined() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]).map(|v| C64::new(v, 0.0));
        let b = DVector::from_vec(vec![C64::new(2.0, 2.0), C64::new(8.0, 0.0)]);
        let x = lstsq_complex(&a, &b).unwrap();
        assert!((x[0] - C64::new(1.0, 1.0)).norm() < 1e-12);
        assert!((x[1] - C64::new(2.0, 0.0)).norm() < 1e-12);

        // Overdetermined: fit y = c on three samples -> mean.
        let a2 = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 1.0]).map(|v| C64::new(v, 0.0));
        let b2 = DVector::from_vec(vec![
            C64::new(1.0, 0.0),
            C64::new(2.0, 0.0),
            C64::new(6.0, 0.0),
        ]);
        let x2 = lstsq_complex(&a2, &b2).unwrap();
        assert!((x2[0] - C64::new(3.0, 0.0)).norm() < 1e-12, "LS of constant = mean");
    }

    #[test]
    fn lstsq_rejects_mismatch_and_singular() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]).map(|v| C64::new(v, 0.0));
        let b = DVector::from_vec(vec![C64::new(1.0, 0.0); 2]);
        assert!(matches!(
            lstsq_complex(&a, &b),
            Err(LinalgError::SingularSystem)
        ));
        let b3 = DVector::from_vec(vec![C64::new(1.0, 0.0); 3]);
        assert!(matches!(
            lstsq_complex(&a, &b3),
            Err(LinalgError::DimensionMismatch(_))
        ));
    }
}
