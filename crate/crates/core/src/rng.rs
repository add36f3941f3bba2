//! Seedable, splittable random streams.
//!
//! Every stochastic routine takes its generator explicitly. Child streams are
//! derived from `(seed, stream)` pairs so that serial and parallel evaluation
//! consume identical randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor_core::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded with `seed`.
/// Stream 0 is identical to `seeded(seed)`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws `n` child generators from a parent.
pub fn split(parent: &mut Rng, n: usize) -> Vec<Rng> {
    use rand::RngCore;
    (0..n).map(|_| seeded(parent.next_u64())).collect()
}

pub fn standard_normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape and data agree")
}

pub fn uniform(shape: &[usize], low: f64, high: f64, rng: &mut Rng) -> Tensor {
    use rand::Rng as _;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(low..high)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape and data agree")
}
