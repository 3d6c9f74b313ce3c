//! Shared inputs for the benchmarks in `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dfa_core::Tensor;

/// `[c × t]` tensor of uniform values in `[-1, 1)`.
pub fn random_tensor(c: usize, t: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![c, t], (0..c * t).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}
