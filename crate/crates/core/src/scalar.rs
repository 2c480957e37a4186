//! Scalar abstraction for the numeric core.
//!
//! Tensor arithmetic, the gradient tape, the model blocks and the
//! aggregation arithmetic are generic over [`Scalar`]. The simulation
//! pipeline pins everything to `f64` (see the aliases in the crate
//! root) so that aggregation-equivalence checks can compare bits.

use num_traits::Float;

/// Floating-point scalar usable by the numeric core.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + std::iter::Sum + Default + 'static
{
    /// Lossy conversion from `f64`, used for constants and learning rates.
    fn from_f64(v: f64) -> Self;

    /// Lossy conversion to `f64`, used when reporting metrics.
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
