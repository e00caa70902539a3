//! Dense row-major `f64` tensors and the handful of kernels the model needs.
//!
//! The free functions here ([`matmul`], [`masked_softmax`], [`rms_norm`]) are
//! value-level: they take and return plain tensors. The same kernels back the
//! recording [`Graph`], which adds reverse-mode gradients on top.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, GradCheckReport, NonFinitePoint};
pub use graph::{Gradients, Graph, ParamId, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::AttentionMask;

/// Epsilon added to the mean square inside RMS normalization.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let [r, c] = dims2(self, "transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new([c, r], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }
}

pub(crate) fn dims2(t: &Tensor, op: &'static str) -> Result<[usize; 2]> {
    match t.shape() {
        &[r, c] => Ok([r, c]),
        s => Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

/// Standard matrix product of `a: m×k` and `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = dims2(a, "matmul")?;
    let [k2, n] = dims2(b, "matmul")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm(
        kernels::MatRef::row_major(a.data(), m, k),
        kernels::MatRef::row_major(b.data(), k, n),
        &mut out,
        0.0,
    );
    Tensor::new([m, n], out)
}

/// Softmax over each row of `logits` restricted to the admissible keys of
/// `mask`. Masked entries are excluded from both the max and the sum, so they
/// come out as exactly `0.0`.
///
/// `logits` may carry leading batch dimensions; the mask applies to the last
/// two.
pub fn masked_softmax(logits: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    let (q, k) = softmax_dims(logits, mask)?;
    let mut out = vec![0.0; logits.len()];
    kernels::masked_softmax(logits.data(), mask, q, k, &mut out)?;
    Tensor::new(logits.shape().to_vec(), out)
}

pub(crate) fn softmax_dims(logits: &Tensor, mask: &AttentionMask) -> Result<(usize, usize)> {
    let s = logits.shape();
    if s.len() < 2 || s[s.len() - 2] != mask.rows() || s[s.len() - 1] != mask.cols() {
        return Err(Error::Shape {
            op: "masked_softmax",
            lhs: s.to_vec(),
            rhs: vec![mask.rows(), mask.cols()],
        });
    }
    Ok((mask.rows(), mask.cols()))
}

/// RMS normalization over the last dimension, scaled by `gain`.
pub fn rms_norm(x: &Tensor, gain: &Tensor) -> Result<Tensor> {
    let d = x.last_dim();
    if gain.shape() != [d] {
        return Err(Error::Shape {
            op: "rms_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; x.len()];
    kernels::rms_norm(x.data(), gain.data(), d, &mut out);
    Tensor::new(x.shape().to_vec(), out)
}
