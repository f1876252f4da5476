use std::fmt::{Debug, Display};
use std::ops::{AddAssign, SubAssign};

/// Floating-point element type for tensors and the autodiff graph.
///
/// `f64` is the verification default: the finite-difference tolerances used
/// throughout the test suite are meaningless at `f32` precision. `f32` is an
/// opt-in for speed.
pub trait Scalar:
    num_traits::Float + AddAssign + SubAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Cast from an `f64` constant. Exact for `f64`, rounds for `f32`.
    fn from_f64(v: f64) -> Self {
        num_traits::NumCast::from(v).expect("f64 constant representable")
    }

    /// Widen to `f64`; named to avoid clashing with `ToPrimitive::to_f64`.
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
