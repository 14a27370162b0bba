use rand::Rng;

use crate::autodiff::{Real, Tensor};

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform<R: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<R> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| R::from_f64(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}
