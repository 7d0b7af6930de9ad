//! Scalar abstraction for the closed-form numerics.
//!
//! Kalman filtering, smoothing and the metric helpers are written once over
//! [`Scalar`] and instantiated for `f32` and `f64`; Monte Carlo code works in
//! `f64` throughout since log-weights over long horizons need the range.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

pub trait Scalar: RealField + Copy + FromPrimitive + ToPrimitive {
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
