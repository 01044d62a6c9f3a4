//! Dense f32 tensor with an optional gradient slot.
//!
//! Tensors are flat row-major buffers plus a shape. They are the unit of
//! parameter storage (weights, biases, firing thresholds): computation runs
//! on a [`crate::tape::Tape`], which snapshots leaf tensors on registration
//! and hands gradients back after the backward pass.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data, grad: None, requires_grad: false }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![value; n])
    }

    /// Xavier-uniform init: entries ~ U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
    pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let data = (0..fan_in * fan_out).map(|_| rng.uniform_sym(a)).collect();
        Tensor::from_vec(vec![fan_in, fan_out], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Additive gradient accumulation (allocates on first use).
    pub fn accumulate_grad(&mut self, grad: &[f32]) {
        assert_eq!(grad.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => self.grad = Some(grad.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Little-endian byte view of the data, for hashing and serialization.
    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// One plain-SGD step on a single tensor: data -= lr * grad, then the grad
/// is cleared. Optionally clamps the result into [lo, hi].
pub fn sgd_step_tensor(t: &mut Tensor, lr: f32, clamp: Option<(f32, f32)>) -> Result<()> {
    let grad = t
        .grad
        .take()
        .ok_or_else(|| Error::Contract("sgd step on tensor with no gradient".into()))?;
    for (p, g) in t.data.iter_mut().zip(&grad) {
        *p -= lr * g;
        if let Some((lo, hi)) = clamp {
            *p = p.clamp(lo, hi);
        }
    }
    if !t.is_finite() {
        return Err(Error::NonFinite("sgd_step"));
    }
    Ok(())
}

/// SGD over a parameter list with one shared learning rate.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f32) -> Result<()> {
    for t in params.iter() {
        if t.grad.is_none() {
            return Err(Error::Contract("sgd step: parameter missing gradient".into()));
        }
    }
    for t in params.iter_mut() {
        sgd_step_tensor(t, lr, None)?;
    }
    Ok(())
}
