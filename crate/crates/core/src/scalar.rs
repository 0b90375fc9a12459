//! Scalar abstraction for the geometric core.
//!
//! All geometry, gating, rank statistics, and optimization code is generic
//! over [`Real`], implemented for `f32` and `f64`. Pipeline-level code
//! (simulator, config, I/O) is `f64`-only via the aliases at the crate root.

use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real: nalgebra::RealField + Copy + FromPrimitive + ToPrimitive {
    /// Lossy conversion from an `f64` constant.
    fn c(value: f64) -> Self {
        Self::from_f64(value).expect("finite f64 constant")
    }

    /// Conversion from a count.
    fn from_count(value: usize) -> Self {
        Self::from_usize(value).expect("count fits in scalar")
    }

    /// Lossy view as `f64`, for diagnostics and reports.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
