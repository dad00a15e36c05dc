//! Scalar abstraction: the training path runs in `f32`, the oracles and
//! finite-difference checks in `f64`. All numeric kernels are written once
//! against this trait.

use ndarray::{LinalgScalar, NdFloat};
use num_traits::FromPrimitive;

pub trait Real: NdFloat + LinalgScalar + FromPrimitive {}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an `f64` constant into the active scalar type.
#[inline]
pub fn c<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("constant must be representable")
}
