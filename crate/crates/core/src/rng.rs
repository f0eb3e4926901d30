//! Deterministic RNG streams.
//!
//! Every random draw in a simulation comes from a ChaCha stream whose seed is
//! a pure function of a base seed and a path of labels, e.g.
//! `(base, "X1/Y1.1/M1.1", replicate 17, "mice")`. Streams never depend on
//! scheduling, so the number of worker threads cannot change any result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_str(s: &str) -> u64 {
    // FNV-1a, then mixed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(h)
}

/// A position in the seed tree. Cheap to copy; derive children with
/// [`StreamKey::child`] / [`StreamKey::label`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        StreamKey(splitmix64(seed))
    }

    pub fn child(self, index: u64) -> Self {
        StreamKey(splitmix64(self.0 ^ splitmix64(index.wrapping_add(1))))
    }

    pub fn label(self, name: &str) -> Self {
        StreamKey(splitmix64(self.0.rotate_left(17) ^ hash_str(name)))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> SimRng {
        let mut seed = [0u8; 32];
        let mut z = self.0;
        for chunk in seed.chunks_mut(8) {
            z = splitmix64(z);
            chunk.copy_from_slice(&z.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}
