use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type accepted by every numerical routine in the crate.
///
/// Training runs in `f32`; gradient checks and oracle comparisons use `f64`.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
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
    /// Converts an `f64` literal. Never fails for the supported types.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    /// Rounds through the `f32` storage representation.
    #[inline]
    fn snap_f32(self) -> Self {
        Self::lit(self.as_f64() as f32 as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
