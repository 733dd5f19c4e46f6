//! Scalar trait and parameter storage shared by the encoders and models.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Floating-point type a model can run in. `f32` is the standard mode;
/// `f64` is used for gradient checking.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A trainable matrix and its accumulated gradient. Vectors are stored as
/// `1 x n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: Array2<F>,
    pub grad: Array2<F>,
}

impl<F: Real> Param<F> {
    pub fn new(value: Array2<F>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Param::new(Array2::zeros((rows, cols)))
    }

    pub fn filled(rows: usize, cols: usize, x: f64) -> Self {
        Param::new(Array2::from_elem((rows, cols), F::of(x)))
    }

    /// Gaussian initialization with the given standard deviation.
    pub fn normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        Param::new(Array2::from_shape_fn((rows, cols), |_| F::of(dist.sample(rng))))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}
