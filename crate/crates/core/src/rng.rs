//! Named random sub-streams derived from one run seed.
//!
//! Each consumer draws from its own ChaCha stream, so changing how many
//! numbers one component consumes never shifts another component's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent consumers of randomness within a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Batching,
    Memory,
    Order,
    Fisher,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Init => 2,
            Stream::Batching => 3,
            Stream::Memory => 4,
            Stream::Order => 5,
            Stream::Fisher => 6,
        }
    }
}

pub type Rng = ChaCha8Rng;

/// Generator for `stream` under `seed`.
pub fn substream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Generator for `stream` under `seed`, further split by `index` (e.g. a task
/// position) so per-task draws are independent of each other.
pub fn indexed_substream(seed: u64, stream: Stream, index: u64) -> Rng {
    substream(splitmix64(seed ^ splitmix64(index.wrapping_add(1))), stream)
}

/// Copy of `rng` moved onto `stream`, leaving `rng` itself untouched.
pub fn fork(rng: &Rng, stream: Stream) -> Rng {
    let mut f = rng.clone();
    f.set_stream(stream.id());
    f
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: u64 = substream(3, Stream::Data).random();
        let b: u64 = substream(3, Stream::Init).random();
        let a2: u64 = substream(3, Stream::Data).random();
        assert_eq!(a, a2);
        assert_ne!(a, b);
        let t0: u64 = indexed_substream(3, Stream::Batching, 0).random();
        let t1: u64 = indexed_substream(3, Stream::Batching, 1).random();
        assert_ne!(t0, t1);
    }
}
