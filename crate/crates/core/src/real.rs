use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::Float;

/// Scalar type the engine computes in. Training runs in `f32`; gradient
/// checks run in `f64`.
pub trait Real: Float + Debug + Display + Sum + Default + Send + Sync + 'static {
    /// Short dtype tag used by checkpoint containers.
    const DTYPE: &'static str;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
