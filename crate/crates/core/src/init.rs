//! Seeded parameter initializers.

use ndarray::{Array, Dimension, ShapeBuilder};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

/// Uniform on `[-bound, bound]`, drawn in row-major order.
pub fn uniform<T: Scalar, D: Dimension, Sh: ShapeBuilder<Dim = D>>(
    rng: &mut ChaCha8Rng,
    shape: Sh,
    bound: f64,
) -> Array<T, D> {
    Array::from_shape_simple_fn(shape, || T::of(rng.gen_range(-bound..=bound)))
}

/// Fan-in scaled uniform initializer (`bound = gain / sqrt(fan_in)`).
pub fn kaiming_uniform<T: Scalar, D: Dimension, Sh: ShapeBuilder<Dim = D>>(
    rng: &mut ChaCha8Rng,
    shape: Sh,
    fan_in: usize,
    gain: f64,
) -> Array<T, D> {
    uniform(rng, shape, gain / (fan_in.max(1) as f64).sqrt())
}

pub fn gaussian<T: Scalar, D: Dimension, Sh: ShapeBuilder<Dim = D>>(
    rng: &mut ChaCha8Rng,
    shape: Sh,
    std: f64,
) -> Array<T, D> {
    let normal = Normal::new(0.0, std).expect("finite standard deviation");
    Array::from_shape_simple_fn(shape, || T::of(normal.sample(rng)))
}
