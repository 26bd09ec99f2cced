//! Floating-point element type shared by the whole stack.
//!
//! Training and inference run in `f32`; the same code instantiated at `f64`
//! is what the finite-difference gradient checks use.

use std::cmp::Ordering;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

pub trait Scalar:
    Float + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Short dtype tag, as printed by checkpoint inspection.
    const DTYPE: &'static str;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn cmp_total(&self, other: &Self) -> Ordering;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn cmp_total(&self, other: &Self) -> Ordering {
        self.total_cmp(other)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn cmp_total(&self, other: &Self) -> Ordering {
        self.total_cmp(other)
    }
}

/// Sum whose result depends only on the multiset of summands.
///
/// Values are accumulated in ascending total order, so any permutation of
/// the input yields the same bits.
pub fn set_sum<T: Scalar>(values: &mut [T]) -> T {
    values.sort_unstable_by(T::cmp_total);
    values.iter().fold(T::zero(), |acc, &v| acc + v)
}
