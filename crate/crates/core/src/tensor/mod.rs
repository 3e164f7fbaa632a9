//! Minimal dense-tensor math with reverse-mode differentiation.
//!
//! [`Tensor`] is an immutable value (shape + 64-bit float storage shared via
//! `Arc`); [`Tape`] records an eager operation graph whose [`Var`] handles
//! expose the differentiable operations. Every operation validates shapes and
//! rejects non-finite outputs.

mod gradcheck;
mod ops;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::lovasz_class_term;
pub use params::{AdamW, ParamStore, CHECKPOINT_MAGIC};
pub use tape::{Gradients, Tape, Var};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense row-major tensor of up to 4 axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating shape consistency and finiteness.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::shape(format!(
                "tensor rank must be 1..=4, got {:?}",
                dims
            )));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} values, got {}",
                dims,
                numel,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite value {} at flat index {bad} in tensor {:?}",
                data[bad], dims
            )));
        }
        Ok(Tensor {
            dims,
            data: Arc::new(data),
        })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims,
            data: Arc::new(vec![0.0; numel]),
        }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            if r.len() != m {
                return Err(Error::shape("ragged rows".to_string()));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![n, m], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.dims
            )));
        }
        Ok(self.data[0])
    }

    /// Value at a row-major 2D index.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[i * self.dims[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.dims.len(), 2);
        let m = self.dims[1];
        &self.data[i * m..(i + 1) * m]
    }

    /// Replace one element, returning a new tensor (used by finite-difference
    /// probes; not a tape operation).
    pub fn with_value_at(&self, flat: usize, v: f64) -> Result<Tensor> {
        let mut data = self.data.as_ref().clone();
        data[flat] = v;
        Tensor::new(self.dims.clone(), data)
    }

    pub(crate) fn same_dims(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// Elementwise sum used by gradient accumulation.
pub(crate) fn add_assign(acc: &mut Vec<f64>, x: &[f64]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}
