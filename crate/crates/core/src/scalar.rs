//! Floating-point abstraction shared by every numeric routine in the crate.
//!
//! Training runs in `f32`; oracle and gradient checks run in `f64`. Anything
//! that touches signal values or parameters is written against [`Scalar`].

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; used for constants and hyperparameters.
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    fn of_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize is representable")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    fn to_f32_lossy(self) -> f32 {
        ToPrimitive::to_f32(&self).unwrap_or(f32::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions() {
        assert_eq!(<f32 as Scalar>::of(0.5), 0.5f32);
        assert_eq!(<f64 as Scalar>::of_usize(7), 7.0);
        assert_eq!(2.5f32.to_f64_lossy(), 2.5);
    }
}
