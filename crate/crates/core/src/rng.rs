//! Counter-based random streams.
//!
//! Every draw is addressed by `(seed, domain, counter)`: the seed and domain
//! form the ChaCha key and the counter selects the stream. A value therefore
//! depends only on its address, never on how many draws happened before it,
//! so resuming from a checkpoint reproduces the same randomness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Pacing = 1,
    Batch = 2,
    Dropout = 3,
    Init = 4,
}

pub fn stream(seed: u64, domain: Domain, counter: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(counter);
    rng
}

/// A single uniform draw in `[0, 1)`.
pub fn uniform(seed: u64, domain: Domain, counter: u64) -> f64 {
    stream(seed, domain, counter).random::<f64>()
}
