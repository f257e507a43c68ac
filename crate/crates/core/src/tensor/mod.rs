//! Minimal reverse-mode automatic differentiation on dense f64 tensors.
//!
//! [`Tensor`] is a cheaply clonable handle to shared storage; [`Tape`]
//! records one backward closure per differentiable operation while a forward
//! pass runs, then replays them in reverse from a scalar output. Gradients
//! accumulate into each tensor until [`Tensor::zero_grad`], so micro-batches
//! can sum their gradients by running several forward/backward passes.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use rand::Rng;
use thiserror::Error;

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod ops;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {context}: {details}")]
    ShapeMismatch { context: &'static str, details: String },
    #[error("backward needs a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("tape already consumed; record a fresh forward pass before backward")]
    TapeConsumed,
    #[error("invalid operation: {0}")]
    Invalid(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Handle to a shared dense tensor. Cloning aliases the same storage.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<Inner>>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("numel", &inner.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                context: "Tensor::new",
                details: format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor(Rc::new(RefCell::new(Inner {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }))))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("consistent by construction")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[], vec![v]).expect("rank-0 scalar")
    }

    /// Marks this tensor as a trainable leaf and returns it.
    pub fn requiring_grad(self) -> Tensor {
        self.0.borrow_mut().requires_grad = true;
        self
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.0.borrow_mut().requires_grad = v;
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        let inner = self.0.borrow();
        if inner.data.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: inner.shape.clone(),
            });
        }
        Ok(inner.data[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Copy of the values with no recorded history and no gradient flag.
    pub fn detach(&self) -> Tensor {
        let inner = self.0.borrow();
        Tensor::new(&inner.shape, inner.data.clone()).expect("same shape")
    }

    /// Runs `f` with mutable access to the raw values (used by optimizers
    /// and the finite-difference checker). Gradients are left untouched.
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        f(&mut self.0.borrow_mut().data)
    }

    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.0.borrow().data)
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut inner = self.0.borrow_mut();
        debug_assert_eq!(inner.data.len(), g.len(), "gradient length mismatch");
        match &mut inner.grad {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => inner.grad = Some(g.to_vec()),
        }
    }

    pub(crate) fn grad_snapshot(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }
}

type BackwardOp = Box<dyn FnOnce()>;

/// Gradient tape: one per forward/backward round.
pub struct Tape {
    records: RefCell<Vec<BackwardOp>>,
    recording: Cell<bool>,
    armed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            records: RefCell::new(Vec::new()),
            recording: Cell::new(true),
            armed: Cell::new(false),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    pub fn num_recorded(&self) -> usize {
        self.records.borrow().len()
    }

    /// Runs `f` with recording suspended; operations inside produce
    /// constants that carry no history.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.recording.replace(false);
        let out = f();
        self.recording.set(prev);
        out
    }

    pub(crate) fn record(&self, op: impl FnOnce() + 'static) {
        debug_assert!(self.recording.get(), "record called while not recording");
        self.armed.set(true);
        self.records.borrow_mut().push(Box::new(op));
    }

    /// Seeds d(output)/d(output) = 1 and replays the recorded operations in
    /// reverse, accumulating gradients into every tensor that requires them.
    /// Consumes the recording; a second call without a new forward pass is
    /// an error.
    pub fn backward(&self, output: &Tensor) -> Result<(), TensorError> {
        if output.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: output.shape(),
            });
        }
        if !self.armed.get() {
            return Err(TensorError::TapeConsumed);
        }
        self.armed.set(false);
        output.accumulate_grad(&[1.0]);
        let mut records = self.records.take();
        while let Some(op) = records.pop() {
            op();
        }
        Ok(())
    }
}

/// Uniform initialization on (-sqrt(1/fan_in), sqrt(1/fan_in)), the usual
/// scaling that keeps activations O(1) at depth.
pub fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(shape, data)
        .expect("consistent by construction")
        .requiring_grad()
}

/// Square matrix initialized as identity plus small uniform noise, so the
/// initial latent dynamics are close to "no change per step".
pub fn near_identity(rng: &mut impl Rng, n: usize, noise: f64) -> Tensor {
    let mut data = vec![0.0; n * n];
    for (idx, v) in data.iter_mut().enumerate() {
        let (r, c) = (idx / n, idx % n);
        *v = if r == c { 1.0 } else { 0.0 } + rng.random_range(-noise..noise);
    }
    Tensor::new(&[n, n], data)
        .expect("consistent by construction")
        .requiring_grad()
}

#[cfg(test)]
mod tests {
    use super::ops;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn clone_aliases_storage() {
        let t = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let alias = t.clone();
        t.with_data_mut(|d| d[0] = 9.0);
        assert_eq!(alias.to_vec(), vec![9.0, 2.0]);
        assert!(t.ptr_eq(&alias));
    }

    #[test]
    fn detach_copies_and_drops_grad_flag() {
        let t = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().requiring_grad();
        let d = t.detach();
        assert!(!d.requires_grad());
        assert!(!d.ptr_eq(&t));
        assert_eq!(d.to_vec(), t.to_vec());
    }

    #[test]
    fn backward_needs_scalar() {
        let tape = Tape::new();
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().requiring_grad();
        let y = ops::scale(&tape, &x, 2.0);
        assert!(matches!(
            tape.backward(&y),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn backward_consumes_tape() {
        let tape = Tape::new();
        let x = Tensor::scalar(3.0).requiring_grad();
        let y = ops::scale(&tape, &x, 2.0);
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
        assert!(matches!(tape.backward(&y), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn gradients_accumulate_across_passes() {
        let x = Tensor::scalar(3.0).requiring_grad();
        for _ in 0..2 {
            let tape = Tape::new();
            let y = ops::scale(&tape, &x, 2.0);
            tape.backward(&y).unwrap();
        }
        assert_eq!(x.grad().unwrap(), vec![4.0], "two passes sum their grads");
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn no_grad_produces_constants() {
        let tape = Tape::new();
        let x = Tensor::scalar(3.0).requiring_grad();
        let y = tape.no_grad(|| ops::scale(&tape, &x, 2.0));
        assert!(!y.requires_grad());
        assert_eq!(tape.num_recorded(), 0);
        assert!(tape.is_recording(), "recording restored after the scope");
        // Nothing was recorded, so backward refuses to run.
        assert!(matches!(tape.backward(&y), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn fan_in_bounds_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = fan_in_uniform(&mut rng, &[8, 9], 9);
        assert!(t.requires_grad());
        let bound = (1.0f64 / 9.0).sqrt();
        for v in t.to_vec() {
            assert!(v.abs() < bound, "init value {v} outside (-{bound}, {bound})");
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let t2 = fan_in_uniform(&mut rng2, &[8, 9], 9);
        assert_eq!(t.to_vec(), t2.to_vec(), "same seed, same init");
    }

    #[test]
    fn near_identity_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = near_identity(&mut rng, 6, 0.01);
        let data = k.to_vec();
        for r in 0..6 {
            for c in 0..6 {
                let v = data[r * 6 + c];
                let expect = if r == c { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 0.01, "K[{r},{c}] = {v}");
            }
        }
    }
}
