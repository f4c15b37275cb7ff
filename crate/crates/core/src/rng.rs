//! Counter-keyed random streams.
//!
//! Every draw site derives its generator from `(seed, key...)`, so a stream
//! depends only on its key and never on how many numbers other sites consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Well-known stream tags used as the first key element.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SYNTH: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const MASK: u64 = 4;
    pub const EVAL_MASK: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const FINETUNE: u64 = 7;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed and key path into one 64-bit stream id.
pub fn derive_seed(seed: u64, key: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ 0x6B64_635F_6D61_6531);
    for &k in key {
        h = splitmix(h ^ splitmix(k));
    }
    h
}

#[derive(Clone, Debug)]
pub struct KeyedRng(ChaCha8Rng);

impl KeyedRng {
    pub fn new(seed: u64, key: &[u64]) -> Self {
        Self(ChaCha8Rng::seed_from_u64(derive_seed(seed, key)))
    }

    pub fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.0
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    /// Normal draw re-sampled until it lies within two standard deviations.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }
}
