//! Floating-point scalar abstraction shared by the loss, model and trainer.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the numerical modules are generic over.
///
/// Implemented for `f32` and `f64`. Embedding payloads are always stored as
/// binary32 and widened with [`Scalar::widen`] on the way in.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn widen(v: f32) -> Self;

    /// Lossy conversion from a literal or accumulated `f64`.
    fn of(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

macro_rules! impl_scalar {
    ($($t:ty),*) => {
        $(
            impl Scalar for $t {
                #[inline]
                fn widen(v: f32) -> Self {
                    v as $t
                }
                #[inline]
                fn of(v: f64) -> Self {
                    v as $t
                }
                #[inline]
                fn to_f64_lossy(self) -> f64 {
                    self as f64
                }
            }
        )*
    };
}

impl_scalar!(f32, f64);

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
