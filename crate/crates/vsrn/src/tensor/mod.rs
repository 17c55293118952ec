//! Dense double-precision tensors with reverse-mode differentiation.
//!
//! [`Tensor`] is plain storage: a shape, a row-major value buffer, and an
//! optional gradient buffer for learnable arrays. Differentiable computation
//! happens on a [`Tape`]: values are copied onto the tape as leaves, every
//! primitive records itself, and [`Tape::backward`] replays the record in
//! reverse. [`grad_check`] compares the reverse-mode gradients against
//! central finite differences.

mod grad_check;
mod tape;

pub use grad_check::grad_check;
pub use tape::{Activation, Tape, TensorId};

use crate::error::{Error, Result};

/// Dense real array in row-major order, double precision.
///
/// The gradient buffer is present exactly when `requires_grad` is set. Grads
/// are accumulated additively across backward passes; callers clear them
/// explicitly between optimizer steps via [`Tensor::zero_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Constant (non-learnable) tensor from raw values.
    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        check_shape(shape, values.len())?;
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad: false,
        })
    }

    /// Learnable tensor; gradient buffer starts at zero.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        check_shape(shape, values.len())?;
        let n = values.len();
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            grad: Some(vec![0.0; n]),
            requires_grad: true,
        })
    }

    /// Learnable tensor with entries drawn uniformly from `[-limit, limit]`.
    pub fn uniform_param<R: rand::Rng>(shape: &[usize], limit: f64, rng: &mut R) -> Result<Self> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
        Tensor::param(shape, values)
    }

    /// All-zero constant tensor.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    /// 1x1 constant.
    pub fn scalar(v: f64) -> Self {
        Tensor::from_values(&[1, 1], vec![v]).expect("scalar shape is valid")
    }

    /// 1xN constant row vector.
    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor::from_values(&[1, n], values).expect("row shape is valid")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!(
                "expected a rank-2 tensor, got shape {other:?}"
            ))),
        }
    }

    /// Reset the gradient buffer to zero.
    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Add `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Err(Error::Contract(
                "cannot accumulate gradient into a tensor without requires_grad".into(),
            ));
        }
        let grad = self.grad.as_mut().expect("requires_grad implies grad");
        if grad.len() != delta.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match tensor length {}",
                delta.len(),
                grad.len()
            )));
        }
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Multiply the gradient buffer in place (used by norm clipping).
    pub fn scale_grad(&mut self, factor: f64) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// True when every value (and gradient entry, if present) is finite.
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!(
            "shape {shape:?} must be nonempty with positive dimensions"
        )));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Shape(format!(
            "shape {shape:?} implies {n} values, got {len}"
        )));
    }
    Ok(())
}
