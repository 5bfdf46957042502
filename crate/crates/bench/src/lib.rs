//! Deterministic inputs shared by the benchmarks.

use modalfuse::{ArchitectureSpec, ConvKernel, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// A `3×3×3` (or `size³`) kernel with weights scaled like the network init.
pub fn random_kernel(out_channels: usize, in_channels: usize, size: usize, seed: u64) -> ConvKernel<f32> {
    let fan_in = (in_channels * size * size * size) as f32;
    let w = random_tensor(&[out_channels, in_channels, size, size, size], seed);
    let w = w.scale(1.0 / fan_in.sqrt());
    ConvKernel::new(w, Tensor::zeros(&[out_channels])).expect("consistent kernel shapes")
}

/// A batch of `b` random patches for `spec`.
pub fn random_batch(spec: &ArchitectureSpec, b: usize, seed: u64) -> Tensor<f32> {
    let mut shape = vec![b];
    shape.extend_from_slice(&spec.input_shape());
    random_tensor(&shape, seed)
}
