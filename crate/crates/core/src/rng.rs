//! Counter-derived RNG streams.
//!
//! Every random decision in a run draws from a stream keyed by
//! `(master seed, domain, a, b)`, e.g. `(seed, Batches, client, round)`.
//! Streams never share state, so the order in which clients are stepped
//! cannot change any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags keeping streams of different subsystems apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    Batches = 2,
    Participation = 3,
    Generator = 4,
    Partition = 5,
    Holdout = 6,
    Trial = 7,
    Identity = 8,
    Eval = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream for `(seed, domain, a, b)`.
pub fn stream(seed: u64, domain: Domain, a: u64, b: u64) -> StreamRng {
    let mut key = [0u8; 32];
    let mut h = splitmix64(seed);
    for (i, word) in [domain as u64, a, b, 0x6665_6461_6c73].iter().enumerate() {
        h = splitmix64(h ^ splitmix64(word.wrapping_add(i as u64)));
        key[i * 8..(i + 1) * 8].copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
