//! Small neural-network substrate with explicit backward passes.
//!
//! Activations are `(batch, len, channels)` arrays; every layer caches what it
//! needs during the forward pass and returns input gradients on the way back.
//! Models are generic over [`Real`] so the same code runs in `f32` for training
//! and in `f64` for finite-difference gradient checks.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{ArrayView1, ArrayView2, ArrayView3, LinalgScalar, ScalarOperand};
use num_traits::Float;

use crate::error::{Error, Result};

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod stack;

pub use gradcheck::grad_check;
pub use optim::{rmsprop_step, RmsProp};
pub use params::{Gradients, ModelParameters, Role};
pub use stack::{LayerSpec, Stack, Tape};

/// Floating-point element type of tensors and models.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Fails if the shape has a zero extent, does not match the data length,
    /// or any value is non-finite.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid tensor shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Result<Self> {
        Self::new(vec![data.len()], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Instability(format!("{what}: non-finite value at element {i}"))),
        }
    }

    pub fn view1(&self) -> ArrayView1<'_, T> {
        ArrayView1::from(&self.data[..])
    }

    /// Views the tensor as a matrix; the leading axes are folded into rows.
    pub fn view2(&self) -> ArrayView2<'_, T> {
        let cols = *self.shape.last().unwrap();
        ArrayView2::from_shape((self.data.len() / cols, cols), &self.data).unwrap()
    }

    pub fn view3(&self) -> Result<ArrayView3<'_, T>> {
        match self.shape[..] {
            [a, b, c] => Ok(ArrayView3::from_shape((a, b, c), &self.data).unwrap()),
            _ => Err(Error::Shape(format!("expected a rank-3 tensor, got {:?}", self.shape))),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// Row-major ndarray to tensor, without a finiteness check.
pub fn tensor_from_array<T: Real, D: ndarray::Dimension>(a: ndarray::Array<T, D>) -> Tensor<T> {
    let shape = a.shape().to_vec();
    let data = if a.is_standard_layout() {
        a.into_raw_vec_and_offset().0
    } else {
        a.iter().copied().collect()
    };
    Tensor { shape, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_validates_shape_and_values() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 4]).is_ok());
        assert!(matches!(Tensor::<f32>::new(vec![2, 3], vec![1.0; 4]), Err(Error::Shape(_))));
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
        assert!(matches!(
            Tensor::<f32>::new(vec![2], vec![1.0, f32::NAN]),
            Err(Error::Instability(_))
        ));
    }

    #[test]
    fn views_fold_leading_axes() {
        let t = Tensor::<f64>::new(vec![2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(t.view2().dim(), (6, 2));
        assert_eq!(t.view3().unwrap()[[1, 2, 1]], 11.0);
        assert_eq!(t.cast::<f32>().data()[5], 5.0f32);
    }
}
