//! Seeded inputs shared by the benchmarks.

use rand::RngExt;
use unitrans_core::numerics::Tensor;
use unitrans_core::seeding;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeding::rng(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0)).expect("finite values")
}

/// Unit sequences with runs of length 1 to 3 over a small alphabet.
pub fn unit_sequences(count: usize, len: usize, alphabet: u32, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = seeding::rng(seed);
    (0..count)
        .map(|_| {
            let mut u = Vec::with_capacity(len);
            while u.len() < len {
                let x = rng.random_range(0..alphabet);
                for _ in 0..rng.random_range(1..=3) {
                    u.push(x);
                }
            }
            u.truncate(len);
            u
        })
        .collect()
}
