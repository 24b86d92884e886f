//! Seeded random streams.
//!
//! Every stream in a run is derived from the single run seed plus a small
//! tuple of labels, so that the order in which clients execute never changes
//! what they draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream type used throughout the simulator.
pub type SimRng = ChaCha8Rng;

/// Domain labels keeping derived streams apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Partition = 1,
    Prompt = 2,
    Client = 3,
    Embedding = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes the run seed with a stream label and indices into a 64-bit key.
pub fn derive_key(seed: u64, stream: Stream, indices: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(stream as u64));
    for &i in indices {
        h = splitmix64(h ^ splitmix64(i.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

/// A fresh stream for `(seed, stream, indices)`.
pub fn derive_rng(seed: u64, stream: Stream, indices: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_key(seed, stream, indices))
}

/// Plain seeded stream, for callers that manage their own seeds.
pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
