//! Counter-based splittable random streams.
//!
//! Every stochastic component in the pipeline (parameter init, shuffling,
//! augmentation, synthetic data) draws from an [`RngStream`] derived from the
//! experiment seed by splitting on a label or index. Streams are independent
//! of scheduling: splitting is pure, so parallel consumers see identical
//! sequences no matter who draws first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used to fold split labels into stream ids.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer; decorrelates sibling streams.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A reproducible random stream identified by `(seed, stream)`.
///
/// `split` derives child streams deterministically; children are pairwise
/// independent for all practical purposes (distinct ChaCha stream counters).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, stream: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream named by a label, e.g. `split("trunk.block3.conv1.weight")`.
    pub fn split(&self, label: &str) -> Self {
        RngStream {
            seed: self.seed,
            stream: mix(self.stream ^ fnv1a(label.as_bytes())),
        }
    }

    /// Child stream indexed by an integer, e.g. per-window or per-fold.
    pub fn split_index(&self, index: u64) -> Self {
        RngStream {
            seed: self.seed,
            stream: mix(self.stream ^ mix(index ^ 0x5851_f42d_4c95_7f2d)),
        }
    }

    /// Materialize the stream as a ChaCha8 generator.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// One u64 drawn from this stream (seed derivation for nested components).
    pub fn rng_u64(&self) -> u64 {
        use rand::Rng;
        self.rng().gen()
    }
}
