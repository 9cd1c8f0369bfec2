//! Seed derivation. Every random draw in the crate is a pure function of a
//! `u64` seed; independent streams are split off with [`sub_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named streams so that, e.g., noise and channel draws never share a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Geometry = 1,
    Shadowing = 2,
    Activity = 3,
    Fading = 4,
    Pilots = 5,
    Payload = 6,
    Noise = 7,
    Training = 8,
    Validation = 9,
    Calibration = 10,
}

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sub_seed(seed: u64, stream: Stream) -> u64 {
    mix(mix(seed) ^ (stream as u64).wrapping_mul(0xd6e8_feb8_6659_fd93))
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, stream))
}

/// Seed of the `index`-th element of a family rooted at `seed`.
pub fn indexed_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    mix(sub_seed(seed, stream) ^ mix(index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        let a = sub_seed(7, Stream::Noise);
        let b = sub_seed(7, Stream::Fading);
        assert_ne!(a, b);
        assert_eq!(a, sub_seed(7, Stream::Noise));
    }

    #[test]
    fn indexed_seeds_distinct() {
        let s: std::collections::HashSet<u64> =
            (0..1000).map(|i| indexed_seed(3, Stream::Training, i)).collect();
        assert_eq!(s.len(), 1000);
    }
}
