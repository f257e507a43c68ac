//! Adam optimizer with bias-corrected first and second moments.

use super::{Tensor, TensorError};

/// Hyperparameters; the defaults are the standard (0.9, 0.999, 1e-8).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for a fixed parameter list. Parameter identity is
/// positional, so moment vectors can be checkpointed and restored by index.
pub struct Adam {
    config: AdamConfig,
    params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step_count: u64,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, config: AdamConfig) -> Adam {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            config,
            params,
            m,
            v,
            step_count: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Clears gradients on every registered parameter.
    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Applies one update from the currently accumulated gradients.
    /// Parameters without a gradient are skipped (their moments are still
    /// kept aligned). Non-finite gradients abort the step.
    pub fn step(&mut self) -> Result<(), TensorError> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (idx, p) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite("gradient in Adam step"));
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            p.with_data_mut(|data| {
                for i in 0..data.len() {
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                }
            });
        }
        Ok(())
    }

    /// Moment vectors and step counter, for checkpointing.
    pub fn state(&self) -> (&[Vec<f64>], &[Vec<f64>], u64) {
        (&self.m, &self.v, self.step_count)
    }

    /// Restores moments and step counter saved by [`Adam::state`].
    pub fn restore(
        &mut self,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        step_count: u64,
    ) -> Result<(), TensorError> {
        let lens: Vec<usize> = self.params.iter().map(|p| p.numel()).collect();
        let ok = m.len() == lens.len()
            && v.len() == lens.len()
            && m.iter().zip(&lens).all(|(mv, l)| mv.len() == *l)
            && v.iter().zip(&lens).all(|(vv, l)| vv.len() == *l);
        if !ok {
            return Err(TensorError::Invalid(
                "optimizer state does not match parameter list".into(),
            ));
        }
        self.m = m;
        self.v = v;
        self.step_count = step_count;
        Ok(())
    }
}
