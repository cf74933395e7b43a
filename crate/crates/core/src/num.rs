//! Scalar abstraction shared by the numerical modules.

use nalgebra as na;
use num_traits as nt;

/// Real scalar the model, observer and watermark math is written against.
///
/// Implemented for `f32` and `f64`. Scenario files, traces and exports are
/// always `f64`; the generic code converts at the boundary with [`Real::of`].
pub trait Real: na::RealField + Copy + nt::FromPrimitive + nt::ToPrimitive {
    /// Converts an `f64` constant into this scalar.
    fn of(v: f64) -> Self {
        <Self as nt::FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    /// Lossy conversion back to `f64` for tracing.
    fn to_f64_lossy(self) -> f64 {
        <Self as nt::ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
