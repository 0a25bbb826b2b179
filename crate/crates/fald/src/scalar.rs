//! Scalar abstraction: every numerical routine in this crate is generic over
//! a floating-point type implementing [`Scalar`] (`f32` or `f64`).

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar (`f32` or `f64`) usable in all samplers and analytics.
pub trait Scalar: RealField + FromPrimitive + ToPrimitive + Copy + Send + Sync + 'static {
    /// Converts an `f64` constant (tolerances, coefficients) into `Self`.
    fn lit(value: f64) -> Self {
        <Self as FromPrimitive>::from_f64(value).expect("finite f64 literal")
    }

    /// Widens to `f64` for reporting and probability arithmetic.
    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar converts to f64")
    }

    /// True when the value is neither NaN nor infinite.
    fn finite(self) -> bool;

    /// Draws a standard-normal variate from `rng`.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn finite(self) -> bool {
        self.is_finite()
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f64 {
    fn finite(self) -> bool {
        self.is_finite()
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}
