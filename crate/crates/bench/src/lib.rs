//! Shared inputs for the benchmarks.

use mtslu::numerics::rng::Rng;
use mtslu::Tensor;

/// Standard normal tensor drawn from a fixed stream.
pub fn normal(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = Rng::stream(seed, "bench");
    Tensor::from_fn(shape, |_| rng.normal() as f32)
}
