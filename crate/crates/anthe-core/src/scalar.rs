//! Element types for tensors: f32 for training, f64 for gradient checks.

use std::fmt::{Debug, Display};

/// Floating-point element type with the extras the op kernels need beyond
/// [`num_traits::Float`] — an exact error function and f64 conversions
/// without `Option` wrapping.
pub trait Scalar: num_traits::Float + Debug + Display + Send + Sync + 'static {
    fn erf(self) -> Self;
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn from_f64(x: f64) -> Self {
        x
    }

    fn into_f64(self) -> f64 {
        self
    }
}
