//! Dense `f64` tensors and a reverse-mode tape over the handful of
//! operations the spotlight model needs.
//!
//! Values are always double precision: the finite-difference checks in
//! [`gradcheck`] cannot reach their tolerance in single precision.

mod conv;
pub mod gradcheck;
mod norm;
mod tape;

use alloc::vec;
use alloc::vec::Vec;

pub use self::conv::{conv_output_extent, Conv2dParams};
pub use self::gradcheck::{grad_check, grad_check_many, GradCheckOptions, GradCheckReport};
pub use self::norm::{BatchNormStats, NormMode};
pub use self::tape::{Tape, Var};

/// Largest supported tensor rank.
pub const MAX_RANK: usize = 4;

/// Probabilities are clamped to this value before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(alloc::string::String),
    #[error("parameter error: {0}")]
    Parameter(alloc::string::String),
    #[error("index {index} out of range for extent {extent}")]
    Index { index: usize, extent: usize },
    #[error("contract error: {0}")]
    Contract(alloc::string::String),
    #[error("unreliable gradient check: {0}")]
    UnreliableCheck(alloc::string::String),
}

pub(crate) fn dim_err(msg: impl core::fmt::Display) -> TensorError {
    TensorError::Dimension(alloc::format!("{msg}"))
}

/// A row-major block of reals with an optional gradient of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.len() > MAX_RANK {
            return Err(dim_err(alloc::format!(
                "rank {} exceeds {MAX_RANK}",
                shape.len()
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err(alloc::format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("rank checked by caller")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value]).unwrap()
    }

    pub fn vector(values: &[f64]) -> Self {
        Self::new(&[values.len()], values.to_vec()).unwrap()
    }

    pub fn matrix(rows: usize, cols: usize, values: &[f64]) -> Result<Self, TensorError> {
        Self::new(&[rows, cols], values.to_vec())
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), TensorError> {
        if grad.len() != self.data.len() {
            return Err(dim_err("gradient length differs from data length"));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> Result<f64, TensorError> {
        if index.len() != self.shape.len() {
            return Err(dim_err("index rank differs from tensor rank"));
        }
        let mut flat = 0;
        for (&i, &extent) in index.iter().zip(&self.shape) {
            if i >= extent {
                return Err(TensorError::Index { index: i, extent });
            }
            flat = flat * extent + i;
        }
        Ok(self.data[flat])
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }
}

/// Plain (untracked) matrix product used by callers that do not need a tape.
pub fn matmul_values(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Numerically safe softmax over a slice.
pub fn softmax_values(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| crate::math::exp(v - max)).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// `-ln(p[label])` with `p` clamped at [`LOG_CLAMP`].
pub fn cross_entropy_value(probs: &[f64], label: usize) -> Result<f64, TensorError> {
    let p = *probs.get(label).ok_or(TensorError::Index {
        index: label,
        extent: probs.len(),
    })?;
    Ok(-crate::math::ln(p.max(LOG_CLAMP)))
}
