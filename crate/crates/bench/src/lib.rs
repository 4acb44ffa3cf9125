//! Shared fixtures for the criterion benches.

use pgformer::nn::mix_seed;
use pgformer::Tensor;

/// Deterministic tensor with entries uniform in [-1, 1).
pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::from_fn(shape, |i| {
        let bits = mix_seed(seed, i as u64) >> 11;
        bits as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}
