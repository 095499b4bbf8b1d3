//! Scalar abstraction for the numeric core.
//!
//! All math in this crate is generic over [`Scalar`], a thin alias over
//! `num_traits::Float` plus the assignment and formatting bounds the layer
//! code needs. `f64` is the default precision used by the adaptation engine
//! and benchmark tooling (see the aliases at the crate root); `f32` is
//! available for callers that want it.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps};

pub trait Scalar:
    Float + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` constant into the scalar type.
#[inline]
pub fn cast<T: Scalar>(v: f64) -> T {
    T::from(v).expect("constant representable in scalar type")
}

/// Converts a count into the scalar type.
#[inline]
pub fn cast_usize<T: Scalar>(n: usize) -> T {
    T::from(n).expect("count representable in scalar type")
}
