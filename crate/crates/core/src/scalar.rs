//! Scalar abstraction for the numeric core.
//!
//! All math in this crate is generic over [`Real`], which is implemented for
//! `f32` and `f64`. Concrete type aliases live at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar used throughout the numeric core.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum<Self>
    + for<'a> Sum<&'a Self>
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an `f64` constant into the working scalar type.
#[inline]
pub fn r64<R: Real>(v: f64) -> R {
    R::from_f64(v).expect("f64 constant representable in scalar type")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_conversion_both_widths() {
        let a: f32 = r64(0.25);
        let b: f64 = r64(0.25);
        assert_eq!(a, 0.25f32);
        assert_eq!(b, 0.25f64);
    }
}
