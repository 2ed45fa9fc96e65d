use num_traits::Float;
use std::fmt::{Debug, Display};

/// The two element types the library runs on: f32 for training and
/// benchmarking, f64 for every verification suite.
pub trait Scalar: Float + Debug + Display + Send + Sync + 'static {
    /// "f32" or "f64"; reported in check summaries and CLI output.
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Gauss error function; exact-form GELU is built on this rather than
    /// the tanh approximation so gradient checks see one less source of
    /// drift.
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self as f64) as f32
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}
