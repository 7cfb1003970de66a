//! Scalar abstraction for the numeric core.
//!
//! All geometry, dynamics, filtering, and control math in this crate is
//! written against [`Real`] instead of a concrete float. `f32` and `f64`
//! implement it, and so does the reverse-mode autodiff scalar
//! [`crate::autodiff::Ad`], which is how the filter training differentiates
//! through the exact same code path used at inference time.

/// Floating-point scalar usable by the numeric core.
///
/// Combines nalgebra's `RealField` (which supplies the transcendental and
/// ordering operations) with `num_traits::FromPrimitive` and `Copy`.
pub trait Real: nalgebra::RealField + num_traits::FromPrimitive + Copy {
    /// Lift an `f64` constant into this scalar type.
    fn of(x: f64) -> Self;

    /// Collapse to `f64` (lossy for exotic scalars; exact for `f64`).
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
