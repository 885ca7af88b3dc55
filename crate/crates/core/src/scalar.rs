//! Scalar abstraction: the numeric core is generic over `f32`/`f64`.

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point scalar usable by the tensor engine.
///
/// `f64` is the default everywhere (gradient checks need the headroom);
/// `f32` is an opt-in for profiling runs.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + std::iter::Sum + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn of_f64(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("f64 -> scalar")
    }

    fn as_f64(self) -> f64 {
        <Self as num_traits::ToPrimitive>::to_f64(&self).expect("scalar -> f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
