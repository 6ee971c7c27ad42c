//! Counter-based random streams.
//!
//! Every dropout mask is drawn from a generator keyed by
//! `(base_seed, sample_index, pass_index)`, so the masks a sample sees do not
//! depend on batch composition, iteration order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pass index reserved for the student's own training-time dropout.
pub const STUDENT_PASS: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    base_seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(base_seed: u64) -> Self {
        Self { base_seed }
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    /// Derives an independent stream for a named sub-context (epoch, phase, member...).
    pub fn child(&self, tag: u64) -> Self {
        Self {
            base_seed: splitmix64(self.base_seed ^ splitmix64(tag.wrapping_add(0xA5A5_5A5A))),
        }
    }

    /// Generator for one (sample, pass) pair.
    pub fn rng(&self, sample_index: u64, pass_index: u64) -> ChaCha8Rng {
        let key = splitmix64(
            splitmix64(self.base_seed) ^ splitmix64(sample_index).rotate_left(17) ^ pass_index,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        // Distinct streams within the same key space keep (s, p) and (p, s) apart.
        rng.set_stream(pass_index);
        rng
    }

    /// Generator for plain sequential uses (shuffling, initialization).
    pub fn sequential(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix64(self.base_seed))
    }
}
