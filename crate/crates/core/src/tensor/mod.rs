//! Dense tensors, reverse-mode autodiff and the deterministic RNG.
//!
//! Values are stored row-major. Every tape carries a [`Precision`]: in
//! `F32` mode each recorded result is rounded to the nearest 32-bit float,
//! in `F64` mode results keep full double precision (used by the gradient
//! verification suites).

pub(crate) mod kernels;
mod rng;
mod tape;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use kernels::ConvGeometry;
pub use rng::{rng_uniform, Rng};
pub use tape::{Gradients, Tape, Var};

/// Floating point mode used when recording results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }

    pub fn round_slice(self, values: &mut [f64]) {
        if self == Precision::F32 {
            for v in values {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn round_tensor(self, t: &mut Tensor) {
        if self == Precision::F32 {
            self.round_slice(t.data_mut());
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Kinds accepted by [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    Relu,
    Sign,
    Abs,
}

/// N-dimensional array. Cloning is cheap: storage is shared until mutated.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("len", &self.data.len())
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                detail: format!("shape {:?} needs {} values, got {}", shape, numel(&shape), data.len()),
            });
        }
        Ok(Self::from_parts(shape, data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::from_parts(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape.clone())
    }

    pub fn ones_like(&self) -> Self {
        Self::ones(self.shape.clone())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_shape(other, op)?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn expect_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.sum() / self.len() as f64
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other, "dot")?;
        Ok(self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).sum())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the first maximal element.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| invalid("cannot stack an empty list"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.expect_shape(t, "stack")?;
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        Ok(Self::from_parts(shape, data))
    }

    /// The `i`-th slice along the leading axis.
    pub fn index_axis0(&self, i: usize) -> Result<Self> {
        if self.rank() == 0 || i >= self.shape[0] {
            return Err(Error::InvalidShape {
                op: "index_axis0",
                detail: format!("index {i} out of range for shape {:?}", self.shape),
            });
        }
        let inner = self.len() / self.shape[0];
        Ok(Self::from_parts(
            self.shape[1..].to_vec(),
            self.data[i * inner..(i + 1) * inner].to_vec(),
        ))
    }

    /// Prepends an axis of length one.
    pub fn unsqueeze0(&self) -> Self {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.shape);
        Self {
            shape,
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
        }
    }
}

/// Applies an elementwise operation. Binary ops require equal shapes or a
/// scalar on either side.
pub fn elementwise(op: ElementwiseOp, x: &Tensor, y: Option<&Tensor>) -> Result<Tensor> {
    let binary = |f: fn(f64, f64) -> f64, name: &'static str| -> Result<Tensor> {
        let y = y.ok_or_else(|| invalid(format!("{name} needs two operands")))?;
        if y.rank() == 0 {
            let s = y.data()[0];
            Ok(x.map(|a| f(a, s)))
        } else if x.rank() == 0 {
            let s = x.data()[0];
            Ok(y.map(|b| f(s, b)))
        } else {
            x.zip_map(y, name, f)
        }
    };
    match op {
        ElementwiseOp::Add => binary(|a, b| a + b, "add"),
        ElementwiseOp::Sub => binary(|a, b| a - b, "sub"),
        ElementwiseOp::Mul => binary(|a, b| a * b, "mul"),
        ElementwiseOp::Neg => Ok(x.map(|a| -a)),
        ElementwiseOp::Scale(c) => Ok(x.scale(c)),
        ElementwiseOp::Relu => Ok(x.map(|a| a.max(0.0))),
        ElementwiseOp::Sign => Ok(x.map(sign)),
        ElementwiseOp::Abs => Ok(x.map(f64::abs)),
    }
}

/// Sign with `sign(0) = 0`.
#[inline]
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Rank-2 matrix product without tape participation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = kernels::matmul_dims(a.shape(), b.shape())?;
    Ok(Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_examples() {
        let a = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new([2], vec![3.0, 4.0]).unwrap();
        let sum = elementwise(ElementwiseOp::Add, &a, Some(&b)).unwrap();
        assert_eq!(sum.data(), &[4.0, 6.0]);

        let x = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let h = elementwise(ElementwiseOp::Mul, &x, Some(&Tensor::new([3], vec![0.0, 1.0, 2.0]).unwrap())).unwrap();
        assert_eq!(h.data(), &[0.0, 2.0, 6.0]);
        assert_eq!(elementwise(ElementwiseOp::Mul, &x, Some(&x.ones_like())).unwrap(), x);
        assert_eq!(
            elementwise(ElementwiseOp::Mul, &x, Some(&x.zeros_like())).unwrap(),
            x.zeros_like()
        );
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([3, 2]);
        let err = elementwise(ElementwiseOp::Add, &a, Some(&b)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn scalar_broadcast_only() {
        let a = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = elementwise(ElementwiseOp::Mul, &a, Some(&Tensor::scalar(2.0))).unwrap();
        assert_eq!(r.data(), &[2.0, 4.0, 6.0]);
        assert!(elementwise(ElementwiseOp::Add, &a, Some(&Tensor::zeros([1, 3]))).is_err());
    }

    #[test]
    fn matmul_examples() {
        let eye = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let r = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        let c = Tensor::new([2, 1], vec![2.0, 5.0]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[2.0]);
        assert!(matmul(&r, &r).is_err());
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new([2, 2], vec![0.0; 3]).is_err());
        assert_eq!(Tensor::scalar(3.0).item().unwrap(), 3.0);
    }

    #[test]
    fn f32_rounding() {
        let v = 0.1_f64;
        assert_eq!(Precision::F32.round(v), 0.1_f32 as f64);
        assert_eq!(Precision::F64.round(v), v);
    }
}
