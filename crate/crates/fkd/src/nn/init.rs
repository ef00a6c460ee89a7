//! Parameter initialization: Glorot-uniform weights, zero biases.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::mat::Mat;

/// Glorot-uniform `in_dim x out_dim` matrix.
pub fn glorot(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Mat {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    Mat::from_fn(in_dim, out_dim, |_, _| rng.gen_range(-limit..limit))
}
