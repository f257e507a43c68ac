//! Training-data pipeline: variable transform, normalization, and the
//! mirror-augmentation used when building samples.
//!
//! Saved solver states hold conserved quantities; the learned model works on
//! (rho, u1, u3, theta) instead, normalized per variable to zero mean and
//! unit variance over the training split.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::euler::{Field2D, State2D};

/// Variables the model consumes, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variable {
    Rho,
    U1,
    U3,
    Theta,
}

impl Variable {
    pub const ALL: [Variable; 4] = [Variable::Rho, Variable::U1, Variable::U3, Variable::Theta];

    pub fn index(self) -> usize {
        match self {
            Variable::Rho => 0,
            Variable::U1 => 1,
            Variable::U3 => 2,
            Variable::Theta => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variable::Rho => "rho",
            Variable::U1 => "u1",
            Variable::U3 => "u3",
            Variable::Theta => "theta",
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// A state re-expressed in model variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformedFields {
    pub rho: Field2D,
    pub u1: Field2D,
    pub u3: Field2D,
    pub theta: Field2D,
}

impl TransformedFields {
    pub fn shape(&self) -> (usize, usize) {
        self.rho.shape()
    }

    pub fn field(&self, v: Variable) -> &Field2D {
        match v {
            Variable::Rho => &self.rho,
            Variable::U1 => &self.u1,
            Variable::U3 => &self.u3,
            Variable::Theta => &self.theta,
        }
    }

    pub fn field_mut(&mut self, v: Variable) -> &mut Field2D {
        match v {
            Variable::Rho => &mut self.rho,
            Variable::U1 => &mut self.u1,
            Variable::U3 => &mut self.u3,
            Variable::Theta => &mut self.theta,
        }
    }

    /// Mirror about the vertical centerline: every field reverses in x and
    /// the horizontal velocity changes sign. Applying it twice is a bitwise
    /// identity.
    pub fn mirror_x(&self) -> TransformedFields {
        let mut u1 = self.u1.mirror_x();
        for v in u1.data_mut() {
            *v = -*v;
        }
        TransformedFields {
            rho: self.rho.mirror_x(),
            u1,
            u3: self.u3.mirror_x(),
            theta: self.theta.mirror_x(),
        }
    }
}

/// Conserved state -> (rho, u1, u3, theta).
pub fn transform_variables(state: &State2D) -> TransformedFields {
    let (nz, nx) = state.shape();
    let mut u1 = Field2D::zeros(nz, nx);
    let mut u3 = Field2D::zeros(nz, nx);
    let mut theta = Field2D::zeros(nz, nx);
    for c in 0..nz * nx {
        let rho = state.rho.data()[c];
        u1.data_mut()[c] = state.rho_u1.data()[c] / rho;
        u3.data_mut()[c] = state.rho_u3.data()[c] / rho;
        theta.data_mut()[c] = state.rho_theta.data()[c] / rho;
    }
    TransformedFields {
        rho: state.rho.clone(),
        u1,
        u3,
        theta,
    }
}

/// Inverse of [`transform_variables`] up to round-off.
pub fn untransform_variables(fields: &TransformedFields, time: f64) -> State2D {
    let (nz, nx) = fields.shape();
    let mut s = State2D::zeros(nz, nx);
    for c in 0..nz * nx {
        let rho = fields.rho.data()[c];
        s.rho.data_mut()[c] = rho;
        s.rho_u1.data_mut()[c] = rho * fields.u1.data()[c];
        s.rho_u3.data_mut()[c] = rho * fields.u3.data()[c];
        s.rho_theta.data_mut()[c] = rho * fields.theta.data()[c];
    }
    s.time = time;
    s
}

/// Standard-deviation floor; constant fields normalize to exactly zero
/// instead of dividing by zero.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-variable population mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl Default for NormStats {
    /// Identity normalization.
    fn default() -> Self {
        NormStats {
            mean: [0.0; 4],
            std: [1.0; 4],
        }
    }
}

impl NormStats {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for v in self.mean.iter().chain(self.std.iter()) {
            if !v.is_finite() {
                return Err(PipelineError::NonFinite("normalization stats"));
            }
        }
        if self.std.iter().any(|&s| s < STD_FLOOR) {
            return Err(PipelineError::NonFinite("standard deviation below floor"));
        }
        Ok(())
    }
}

/// Population statistics over every cell of every provided sample, computed
/// in two passes (exact mean first, then centered variance).
pub fn compute_norm_stats<'a>(
    samples: impl Iterator<Item = &'a TransformedFields> + Clone,
) -> Result<NormStats, PipelineError> {
    let mut count = 0usize;
    let mut sum = [0.0f64; 4];
    for fields in samples.clone() {
        for v in Variable::ALL {
            let data = fields.field(v).data();
            if data.iter().any(|x| !x.is_finite()) {
                return Err(PipelineError::NonFinite(v.name()));
            }
            sum[v.index()] += data.iter().sum::<f64>();
        }
        count += fields.rho.data().len();
    }
    if count == 0 {
        return Err(PipelineError::Empty("compute_norm_stats"));
    }
    let mean = sum.map(|s| s / count as f64);
    let mut sq = [0.0f64; 4];
    for fields in samples {
        for v in Variable::ALL {
            let m = mean[v.index()];
            sq[v.index()] += fields
                .field(v)
                .data()
                .iter()
                .map(|x| (x - m) * (x - m))
                .sum::<f64>();
        }
    }
    let std = sq.map(|s| (s / count as f64).sqrt().max(STD_FLOOR));
    Ok(NormStats { mean, std })
}

/// (x - mean) / std per variable.
pub fn normalize(fields: &TransformedFields, stats: &NormStats) -> TransformedFields {
    let mut out = fields.clone();
    for v in Variable::ALL {
        let m = stats.mean[v.index()];
        let s = stats.std[v.index()];
        for x in out.field_mut(v).data_mut() {
            *x = (*x - m) / s;
        }
    }
    out
}

/// Inverse of [`normalize`].
pub fn denormalize(fields: &TransformedFields, stats: &NormStats) -> TransformedFields {
    let mut out = fields.clone();
    for v in Variable::ALL {
        let m = stats.mean[v.index()];
        let s = stats.std[v.index()];
        for x in out.field_mut(v).data_mut() {
            *x = *x * s + m;
        }
    }
    out
}

/// Mirror augmentation applied to a consecutive sample pair.
pub fn horizontal_flip(
    x_k: &TransformedFields,
    x_k1: &TransformedFields,
) -> (TransformedFields, TransformedFields) {
    (x_k.mirror_x(), x_k1.mirror_x())
}
