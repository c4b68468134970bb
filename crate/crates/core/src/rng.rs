//! Seeded random streams. A single user-facing seed fans out into named,
//! independent sub-streams (weight init, epoch shuffling, scene synthesis) so
//! that changing how one consumer draws numbers never perturbs the others.
//! Identical seeds always reproduce identical streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose of a sub-stream; the discriminant is folded into the ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialization.
    Init,
    /// Per-epoch shuffling of the training set.
    Shuffle,
    /// Synthetic scene generation.
    Synth,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Shuffle => 2,
            Stream::Synth => 3,
        }
    }
}

/// RNG for a named sub-stream of `seed`. `index` separates sibling consumers
/// within a stream (e.g. per-scene generators), so scenes can be produced
/// independently and in any order while staying byte-reproducible.
pub fn substream(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream.id() << 32) | (index & 0xffff_ffff));
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<u64> = substream(7, Stream::Init, 0).sample_iter(rand::distributions::Standard).take(16).collect();
        let b: Vec<u64> = substream(7, Stream::Init, 0).sample_iter(rand::distributions::Standard).take(16).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn streams_are_independent() {
        let init: Vec<u64> = substream(7, Stream::Init, 0).sample_iter(rand::distributions::Standard).take(16).collect();
        let shuf: Vec<u64> = substream(7, Stream::Shuffle, 0).sample_iter(rand::distributions::Standard).take(16).collect();
        let synth0: Vec<u64> = substream(7, Stream::Synth, 0).sample_iter(rand::distributions::Standard).take(16).collect();
        let synth1: Vec<u64> = substream(7, Stream::Synth, 1).sample_iter(rand::distributions::Standard).take(16).collect();
        assert_ne!(init, shuf);
        assert_ne!(synth0, synth1);
    }

    #[test]
    fn different_seeds_differ() {
        let a: Vec<u64> = substream(1, Stream::Init, 0).sample_iter(rand::distributions::Standard).take(4).collect();
        let b: Vec<u64> = substream(2, Stream::Init, 0).sample_iter(rand::distributions::Standard).take(4).collect();
        assert_ne!(a, b);
    }
}
