//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Everything is row-major and contiguous. The only broadcasting supported
//! is a trailing-dimension bias add; all other ops require exact shapes.
//! Non-finite values are treated as an error state, never propagated
//! silently: checks run at debug-assert level and can be switched off for
//! timed benchmark regions via [`set_strict_finite_checks`].

pub mod kernels;
pub mod tape;

use std::cell::Cell;
use thiserror::Error;

pub use tape::{Tape, Var};

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value ({value}) produced by {context} at flat index {index}")]
    NonFinite {
        context: String,
        value: f64,
        index: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape was already consumed by backward")]
    TapeConsumed,
    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("{0}")]
    Invalid(String),
}

thread_local! {
    static STRICT_FINITE: Cell<bool> = const { Cell::new(cfg!(debug_assertions)) };
}

/// Whether library-produced values are scanned for NaN/Inf after each op.
pub fn strict_finite_checks() -> bool {
    STRICT_FINITE.with(|c| c.get())
}

/// Toggle finite-value scanning for the current thread; returns the previous
/// setting. Benchmarks switch this off so the checks do not pollute timing.
pub fn set_strict_finite_checks(on: bool) -> bool {
    STRICT_FINITE.with(|c| c.replace(on))
}

/// A dense row-major f64 tensor. `grad`, when present, has the same number
/// of elements as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        Tensor::new(vec![rows, cols], data)
    }

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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows of a rank-2 tensor (rank-1 counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    /// Columns of a rank-1 or rank-2 tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn validate_finite(&self, context: &str) -> Result<(), NumericsError> {
        validate_finite_slice(&self.data, context)
    }
}

pub(crate) fn validate_finite_slice(data: &[f64], context: &str) -> Result<(), NumericsError> {
    if !strict_finite_checks() {
        return Ok(());
    }
    for (index, &value) in data.iter().enumerate() {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite {
                context: context.to_string(),
                value,
                index,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_mismatched_buffer() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(NumericsError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn finite_checks_toggle() {
        let bad = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(bad.validate_finite("test").is_err());
        let prev = set_strict_finite_checks(false);
        assert!(bad.validate_finite("test").is_ok());
        set_strict_finite_checks(prev);
    }
}
