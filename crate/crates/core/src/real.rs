//! Scalar abstraction over `f32` and `f64`.
//!
//! Training and inference run in `f32`; gradient checking instantiates the
//! same code in `f64` so central finite differences can be held to tight
//! tolerances.

use num_traits::Float;

pub trait Real:
    Float + core::fmt::Debug + core::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
