//! Seeded, named random substreams.
//!
//! Every stochastic choice in the crate draws from a [`Pcg64`] derived from a
//! base seed, a stream name and an index (epoch, step, image, ...). Streams
//! are independent of each other, so e.g. the epoch plan for epoch 7 can be
//! rebuilt without replaying epochs 0..7.

use rand::SeedableRng;
use rand_pcg::Pcg64;
use sha2::{Digest, Sha256};

pub use rand_pcg::Pcg64 as Generator;

pub fn substream(seed: u64, name: &str, index: u64) -> Pcg64 {
    derive(seed, name, &[index])
}

pub fn substream2(seed: u64, name: &str, a: u64, b: u64) -> Pcg64 {
    derive(seed, name, &[a, b])
}

fn derive(seed: u64, name: &str, indices: &[u64]) -> Pcg64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    for index in indices {
        hasher.update(index.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    Pcg64::from_seed(key)
}
