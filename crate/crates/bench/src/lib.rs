//! Shared fixtures for the benchmarks.

use vad_core::{Real, Tensor};

/// Deterministic pseudo-random tensor in `[-1, 1]`.
pub fn fixture<F: Real>(shape: [usize; 4], salt: u64) -> Tensor<F> {
    Tensor::from_fn(shape, |i| {
        let x = (i as u64).wrapping_mul(6364136223846793005).wrapping_add(salt.wrapping_mul(1442695040888963407));
        F::lit((x >> 40) as f64 / (1u64 << 23) as f64 - 1.0)
    })
}
