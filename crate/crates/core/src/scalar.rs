//! Floating-point scalar abstraction shared by the numeric core.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable by tensors, the tape and the metric routines.
///
/// Implemented for `f32` and `f64`. Training math runs in `f64`; files are
/// written in `f32`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal. Panics only if the target cannot hold it,
    /// which never happens for `f32`/`f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Value after a round trip through 32-bit storage.
    #[inline]
    fn round_f32(self) -> Self {
        Self::lit(self.to_f64_lossy() as f32 as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Sum in a fixed left-to-right order.
pub fn ordered_sum<T: Scalar>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |acc, &x| acc + x)
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn mean<T: Scalar>(a: &[T]) -> T {
    ordered_sum(a) / T::lit(a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_f32_is_idempotent() {
        let x = 0.1f64.round_f32();
        assert_eq!(x, x.round_f32());
        assert_eq!(x, 0.1f32 as f64);
    }

    #[test]
    fn helpers() {
        assert_eq!(dot(&[1.0, 2.0], &[3.0, 4.0]), 11.0);
        assert_eq!(norm(&[3.0f32, 4.0]), 5.0);
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
    }
}
