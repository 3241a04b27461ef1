//! Scalar abstraction for the numeric core.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar the engine computes in: `f32` or `f64`.
///
/// Data files and wire formats always carry `f64`; [`Scalar::of`] and
/// [`Scalar::as_f64`] convert at the boundary.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssignOps
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Short tag recorded in serialized containers ("f32" / "f64").
    const DTYPE: &'static str;

    fn of(x: f64) -> Self {
        num_traits::FromPrimitive::from_f64(x).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }

    fn of_usize(n: usize) -> Self {
        num_traits::FromPrimitive::from_usize(n).expect("usize converts")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}
