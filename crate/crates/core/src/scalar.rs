//! Scalar abstraction: all numeric code is generic over `f32` / `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type for tensors and solver math.
///
/// `f64` is the default precision (gradient checks and the acceptance suite
/// depend on tight finite-difference tolerances); `f32` is available where
/// speed matters more than precision.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Conversion from `f64`; hyperparameters are stored as `f64` and
    /// converted at the point of use.
    fn from_f(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    /// Widening (for `f32`) or identity (for `f64`) conversion to `f64`.
    fn to_f(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
