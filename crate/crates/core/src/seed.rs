//! Stable seed derivation.
//!
//! Every random stream in the pipeline is keyed by a tuple of integers
//! and labels folded through splitmix64, so results never depend on the
//! standard library's hasher or on iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builder that folds heterogeneous key parts into one 64-bit seed.
#[derive(Debug, Clone, Copy)]
pub struct SeedKey(u64);

impl SeedKey {
    pub fn new(root: u64) -> Self {
        SeedKey(splitmix(root))
    }

    pub fn with(self, part: u64) -> Self {
        SeedKey(splitmix(self.0 ^ splitmix(part)))
    }

    pub fn with_str(self, label: &str) -> Self {
        // FNV-1a over the label bytes.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        self.with(h)
    }

    pub fn with_f64(self, x: f64) -> Self {
        self.with(x.to_bits())
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

/// Convenience: seed derived from a root and a label.
pub fn derive(root: u64, label: &str) -> SeedKey {
    SeedKey::new(root).with_str(label)
}
