//! Scalar abstraction for the numeric core.
//!
//! The performance model and metric statistics are generic over a floating
//! point scalar so they can be instantiated at `f32` or `f64`. Everything
//! downstream of the simulator uses the `f64` defaults.

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Scalar: Float + FromPrimitive + std::fmt::Debug + std::fmt::Display {
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to scalar")
    }

    fn from_u64_lossy(x: u64) -> Self {
        Self::from_u64(x).expect("u64 converts to scalar")
    }

    fn from_usize_lossy(x: usize) -> Self {
        Self::from_usize(x).expect("usize converts to scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converts_both_widths() {
        assert_eq!(f32::from_f64_lossy(1.5), 1.5f32);
        assert_eq!(f64::from_u64_lossy(8192), 8192.0);
        assert_eq!(f64::from_usize_lossy(3), 3.0);
    }
}
