//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! Values live in [`Tensor`]; differentiable computation is recorded on a
//! [`Tape`] and addressed through [`Var`] handles. Only the operations a
//! pre-activation ResNet and its loss need are provided.

mod conv;
mod ops;
mod tape;

pub use conv::{conv2d_forward, Conv2dGeometry};
pub use ops::{softmax_rows, BatchNormMode, BatchStats, RunningStats, CLAMP_MIN_PROB};
pub use tape::{Gradients, Tape, Var};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

/// Floating point element type of a tensor.
pub trait Scalar:
    num_traits::Float + AddAssign + SubAssign + MulAssign + Sum + Debug + Default + Send + Sync + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;
    const NAME: &'static str;
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    const NAME: &'static str = "f64";
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// n-dimensional array with row-major storage and an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("shape {shape:?} has a zero-sized axis")));
        }
        if numel(shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(shape),
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
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Copies rows `indices` along the leading axis.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let rows = *self
            .shape
            .first()
            .ok_or_else(|| Error::Dimension("select_rows on a rank-0 tensor".into()))?;
        let stride = self.data.len() / rows;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= rows {
                return Err(Error::Dimension(format!("row {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(&shape, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// Central finite-difference gradient of a scalar function.
///
/// Each coordinate is perturbed by `±eps` in the tensor's own precision and
/// the realized step (after rounding) is used as the denominator.
pub fn finite_diff_grad<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> f64, x: &Tensor<T>, eps: f64) -> Tensor<T> {
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data[i];
        let plus = T::of_f64(orig.as_f64() + eps);
        let minus = T::of_f64(orig.as_f64() - eps);
        probe.data[i] = plus;
        let f_plus = f(&probe);
        probe.data[i] = minus;
        let f_minus = f(&probe);
        probe.data[i] = orig;
        let h = plus.as_f64() - minus.as_f64();
        grad.push(T::of_f64((f_plus - f_minus) / h));
    }
    Tensor {
        shape: x.shape.clone(),
        data: grad,
        requires_grad: false,
        grad: None,
    }
}

/// Largest elementwise deviation, scaled by the larger of the two inf-norms.
pub fn max_relative_error<T: Scalar>(analytic: &[T], numeric: &[T]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.as_f64().abs())
        .fold(0.0_f64, f64::max)
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a.as_f64() - n.as_f64()).abs())
        .fold(0.0_f64, f64::max)
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
        let t = Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::<f64>::zeros(&[2]);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn finite_diff_of_sum_is_ones() {
        let x = Tensor::<f64>::new(&[3], vec![0.3, -1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().sum::<f64>(), &x, 1e-4);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_of_square() {
        let x = Tensor::<f64>::new(&[1], vec![3.0]).unwrap();
        let eps = 1e-3;
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, eps);
        assert!((g.data()[0] - 6.0).abs() <= eps * eps);
    }
}
