//! Seeded random substreams.
//!
//! Every source of randomness derives from one user seed plus a named stream,
//! so changing how often one consumer draws never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Generate,
    Split,
    Init,
    Sampling,
    SeedRatio,
    Questions,
    DropX,
    Test,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Generate => 1,
            Stream::Split => 2,
            Stream::Init => 3,
            Stream::Sampling => 4,
            Stream::SeedRatio => 5,
            Stream::Questions => 6,
            Stream::DropX => 7,
            Stream::Test => 99,
        }
    }
}

pub fn substream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Substream further keyed by an index, e.g. one stream per (question, trial).
pub fn keyed_substream(seed: u64, stream: Stream, key: u64) -> Rng {
    let mixed = seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(stream.id());
    rng
}
