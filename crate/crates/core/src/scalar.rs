use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type for tensors, tapes and models.
///
/// All arithmetic in the crate is generic over this trait. Reductions widen
/// to `f64` through [`Scalar::widen`] regardless of the element type.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Narrowing conversion from `f64` (round to nearest).
    fn narrow(v: f64) -> Self;

    fn widen(self) -> f64;

    /// Bit pattern widened to `u64`, for bitwise comparisons.
    fn bits(self) -> u64;
}

impl Scalar for f32 {
    #[inline]
    fn narrow(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }

    #[inline]
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    #[inline]
    fn narrow(v: f64) -> Self {
        v
    }

    #[inline]
    fn widen(self) -> f64 {
        self
    }

    #[inline]
    fn bits(self) -> u64 {
        self.to_bits()
    }
}
