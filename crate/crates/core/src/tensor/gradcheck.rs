//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Step h = h_scale * max(1, |value|), balancing truncation against
    /// cancellation for values of any magnitude.
    pub h_scale: f64,
    /// Check at most this many elements per tensor (None = all), chosen by
    /// a seeded shuffle so large models stay affordable yet reproducible.
    pub max_elems_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h_scale: 1e-6,
            max_elems_per_tensor: None,
            seed: 0,
        }
    }
}

/// Worst observed discrepancy, for diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct WorstElem {
    pub param: usize,
    pub elem: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// max over checked elements of |a - n| / max(|a|, |n|, 1).
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<WorstElem>,
}

/// Compares the recorded gradients of a deterministic scalar function
/// against central finite differences.
///
/// `f` must rebuild the same loss from the current parameter values on each
/// call; it is invoked once with recording enabled and then twice per
/// checked element with recording off.
pub fn gradient_check<F>(
    f: F,
    params: &[Tensor],
    config: &GradCheckConfig,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Tape) -> Result<Tensor, TensorError>,
{
    for p in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape)?;
    if !loss.item()?.is_finite() {
        return Err(TensorError::NonFinite("gradient_check loss"));
    }
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |tape: &Tape| -> Result<f64, TensorError> {
        let out = tape.no_grad(|| f(tape))?;
        out.item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for (pi, p) in params.iter().enumerate() {
        let numel = p.numel();
        let indices: Vec<usize> = match config.max_elems_per_tensor {
            Some(m) if m < numel => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(pi as u64));
                let mut all: Vec<usize> = (0..numel).collect();
                all.shuffle(&mut rng);
                all.truncate(m);
                all.sort_unstable();
                all
            }
            _ => (0..numel).collect(),
        };
        for i in indices {
            let orig = p.with_data(|d| d[i]);
            let h = config.h_scale * orig.abs().max(1.0);
            p.with_data_mut(|d| d[i] = orig + h);
            let plus = eval(&Tape::new())?;
            p.with_data_mut(|d| d[i] = orig - h);
            let minus = eval(&Tape::new())?;
            p.with_data_mut(|d| d[i] = orig);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(WorstElem {
                    param: pi,
                    elem: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
