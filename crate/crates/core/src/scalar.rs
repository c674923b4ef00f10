//! Scalar abstraction: all numeric code in this crate is generic over the
//! element type so the same model runs in `f32` (training) and `f64`
//! (finite-difference gradient verification).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssign};

/// Floating-point element type accepted by tensors, layers and losses.
///
/// `LinalgScalar` lets `ndarray` dispatch matrix products to its optimized
/// f32/f64 kernels; the remaining bounds cover elementwise math and printing.
pub trait Scalar:
    Float + NumAssign + ScalarOperand + LinalgScalar + Sum + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;

    fn to_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}
