//! Dense `f64` tensors and a reverse-mode autodiff tape.
//!
//! [`Tensor`] is plain storage: a row-major value buffer plus a shape,
//! with an optional gradient buffer for trainable parameters. All actual
//! computation happens on a [`Tape`], which records every operation as a
//! node so that one [`Tape::backward`] call can push gradients from a
//! scalar loss back to every leaf.

mod tape;

pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// A dense row-major tensor of `f64` values.
///
/// Rank 1 tensors are vectors (`[k]`), rank 2 are matrices (`[r, c]`).
/// The gradient buffer exists exactly when `requires_grad` is set and
/// always has one slot per value.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor from a value buffer and shape. The buffer length
    /// must equal the product of the extents.
    pub fn new(values: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(Error::invalid(
                "tensor",
                format!("{} values do not fill shape {:?}", values.len(), shape),
            ));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    /// An all-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; numel],
            grad: None,
        }
    }

    /// Marks the tensor as trainable, allocating a zero gradient buffer.
    pub fn with_grad(mut self) -> Self {
        let n = self.values.len();
        self.grad = Some(vec![0.0; n]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Extents of a rank-2 tensor as `(rows, cols)`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::invalid(
                "dims2",
                format!("expected rank 2, got shape {:?}", other),
            )),
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Gradient buffer, present iff the tensor is trainable.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Resets the gradient buffer (if any) to zero.
    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Value at `(row, col)` of a rank-2 tensor.
    pub fn at2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.values[row * self.shape[1] + col]
    }
}

/// Index of the first maximum in a slice. Ties break toward the lower
/// index so downstream decoding is deterministic.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
