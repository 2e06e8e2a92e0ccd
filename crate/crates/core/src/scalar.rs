//! Scalar abstraction shared by every numerical routine.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point type usable throughout the crate (`f32` or `f64`).
///
/// Linear algebra comes from [`RealField`]; conversions to and from
/// primitive literals come from `num-traits`.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Tolerance used for simplex membership checks at this precision.
    fn simplex_tol() -> Self {
        let eps: Self = Self::default_epsilon();
        let floor = lit::<Self>(1e-9);
        let scaled = eps * lit(64.0);
        if scaled > floor {
            scaled
        } else {
            floor
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

/// Converts `x` into `f64`.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}
