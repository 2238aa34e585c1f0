//! Counter-based random streams.
//!
//! Every random draw in a run is taken from a generator keyed by
//! `(global seed, stream kind, stream index, step)`, so results do not depend on
//! the order in which environments or particles are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    EnvReset = 1,
    EnvStep = 2,
    BeliefInit = 3,
    Transition = 4,
    Resample = 5,
    Action = 6,
    ParamInit = 7,
    Evaluation = 8,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn stream_rng(seed: u64, kind: Stream, index: u64, step: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ kind as u64);
    h = splitmix64(h ^ index);
    h = splitmix64(h ^ step);
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        h = splitmix64(h.wrapping_add(i as u64));
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
