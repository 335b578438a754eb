//! Reproducible random streams for parallel Monte Carlo.
//!
//! Every path gets its own ChaCha stream selected by path index, so the
//! values a path sees never depend on how rayon batches the work. Results
//! are collected in path order and reduced sequentially afterwards.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub type PathRng = ChaCha8Rng;

/// A master seed from which independent per-path streams are derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an unrelated master seed for a different experiment stage,
    /// e.g. the fresh Monte Carlo layer used to check a sampled CDF.
    pub fn substream(&self, label: u64) -> Self {
        Self {
            seed: splitmix64(self.seed ^ splitmix64(label.wrapping_add(0x5851_f42d_4c95_7f2d))),
        }
    }

    /// Generator for path `index`.
    pub fn rng(&self, index: u64) -> PathRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    /// Runs `f` once per path in parallel and returns the results in path order.
    pub fn par_map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize, &mut PathRng) -> T + Sync + Send,
    {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = self.rng(i as u64);
                f(i, &mut rng)
            })
            .collect()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
