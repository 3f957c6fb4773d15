//! Scalar abstraction for the numeric core.
//!
//! Everything in [`crate::numcore`] is generic over [`Scalar`] so the same
//! tape runs in f32 or f64. The shipped pipeline uses f64 throughout (see the
//! aliases at the crate root); f32 exists mostly to keep the code honest about
//! precision assumptions and for quick memory-bound experiments.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};

/// Floating-point scalar usable by tensors, the tape, and the optimizer.
///
/// `from_f64`/`as_f64` are total (straight `as` casts in spirit): constants in
/// the crate are written as f64 literals and narrowed on entry. (`as_f64`
/// rather than `to_f64` because `ToPrimitive` is already a supertrait of
/// `Float` and its fallible `to_f64` would shadow ours.)
pub trait Scalar:
    Float + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Machine-epsilon-ish tolerance used by internal sanity checks.
    fn tol() -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn tol() -> Self {
        1e-5
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn tol() -> Self {
        1e-12
    }
}
