//! Seeded, per-purpose random streams.
//!
//! Every stochastic step draws from its own ChaCha stream derived from the
//! master seed, a purpose tag, and an index (epoch, sequence, user...), so
//! results do not depend on iteration order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Shuffle,
    Negatives,
    Gumbel,
    Dropout,
    EvalNegatives,
    Synth,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x1,
            Stream::Shuffle => 0x2,
            Stream::Negatives => 0x3,
            Stream::Gumbel => 0x4,
            Stream::Dropout => 0x5,
            Stream::EvalNegatives => 0x6,
            Stream::Synth => 0x7,
        }
    }
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, stream, a, b)`.
pub fn stream_rng(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let key = mix(mix(mix(seed ^ mix(stream.tag())) ^ a) ^ mix(b.wrapping_add(0x51)));
    ChaCha8Rng::seed_from_u64(key)
}
