use serde::{Deserialize, Serialize};

use crate::error::{Result, ScdemError};

/// Dense real-valued n-dimensional array in row-major order.
///
/// The value buffer is immutable once constructed; only the gradient slot is
/// written after the fact, by the reverse-mode pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(ScdemError::dimension(
                "tensor::new",
                "positive dimension sizes",
                format!("{shape:?}"),
            ));
        }
        if values.len() != expected {
            return Err(ScdemError::dimension(
                "tensor::new",
                format!("{expected} values for shape {shape:?}"),
                format!("{} values", values.len()),
            ));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor {
            shape: vec![n],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.values[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Order-sensitive hash of the exact bit patterns of all values.
    /// Used by freeze/snapshot contracts: equal hash ⇔ bit-identical content
    /// up to collisions, and any parameter update changes it.
    pub fn bit_hash(&self) -> u64 {
        let mut h = fnv_seed();
        for &d in &self.shape {
            h = fnv_step(h, d as u64);
        }
        for &v in &self.values {
            h = fnv_step(h, v.to_bits());
        }
        h
    }
}

const fn fnv_seed() -> u64 {
    0xcbf29ce484222325
}

fn fnv_step(mut h: u64, word: u64) -> u64 {
    for i in 0..8 {
        h ^= (word >> (8 * i)) & 0xff;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
