//! Minimal reverse-mode autodiff over `ndarray`, generic over `f32`/`f64`.
//!
//! Training instantiates the tape with `f32`; gradient-check tests instantiate
//! the exact same ops with `f64` so central finite differences are meaningful.

mod ops;
mod tape;

pub use tape::{Grads, Tape, Var};

use ndarray::ArrayD;

/// Element type for tape tensors.
pub trait Elem: ndarray::NdFloat + num_traits::FromPrimitive {}
impl Elem for f32 {}
impl Elem for f64 {}

/// Literal lift: `fl::<F>(0.5)`.
pub fn fl<F: Elem>(x: f64) -> F {
    F::from_f64(x).expect("literal must be representable")
}

pub fn cast_from_f32<F: Elem>(a: &ArrayD<f32>) -> ArrayD<F> {
    a.mapv(|x| fl::<F>(x as f64))
}

pub fn cast_to_f32<F: Elem>(a: &ArrayD<F>) -> ArrayD<f32> {
    a.mapv(|x| x.to_f32().unwrap())
}
