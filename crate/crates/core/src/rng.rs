//! Named, seeded random streams.
//!
//! Every consumer of randomness draws from its own stream derived from the
//! run seed, so the order in which subsystems run (or how many threads they
//! use) never perturbs another subsystem's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split,
    Sampling,
    Init,
    Dropout,
    Synth,
    Eval,
    Shuffle,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Split => 0x5b1d,
            Stream::Sampling => 0x5a3b,
            Stream::Init => 0x1417,
            Stream::Dropout => 0xd120,
            Stream::Synth => 0x5e47,
            Stream::Eval => 0xe7a1,
            Stream::Shuffle => 0x5f1e,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a run seed, a stream tag and any number of indices into one seed.
pub fn derive_seed(seed: u64, stream: Stream, path: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(stream.tag()));
    for &p in path {
        h = splitmix(h ^ p.wrapping_mul(0x2545_f491_4f6c_dd1d));
    }
    h
}

pub fn stream(seed: u64, stream: Stream, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stream, path))
}
