//! Parameter initialization: Glorot-uniform weight matrices, normal
//! embedding tables, zero biases.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::array::Array;
use crate::scalar::Scalar;

/// Glorot/Xavier uniform over `[-sqrt(6/(fan_in+fan_out)), +...]`.
///
/// Fans are passed explicitly so callers can account for receptive fields
/// (convolutions) or factor-as-matrix views (TC chains).
pub fn glorot_uniform<T: Scalar, R: Rng>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Array<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Array::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

/// Zero-mean normal with the given standard deviation.
pub fn normal_std<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Array<T> {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Array::new(shape.to_vec(), data).expect("shape/data agree by construction")
}
