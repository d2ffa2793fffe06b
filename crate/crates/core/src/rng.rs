//! Named, seed-derived random streams.
//!
//! Every stochastic step (split, shuffle, parameter init, synthetic data)
//! draws from its own stream derived from one root seed and a stream name,
//! so adding a draw in one place never perturbs another.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const DEFAULT_SEED: u64 = 42;

static GLOBAL_SEED: AtomicU64 = AtomicU64::new(DEFAULT_SEED);

/// Root seed from which named substreams are derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeder {
    seed: u64,
}

impl Seeder {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn key(&self, name: &str) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(b"/");
        hasher.update(name.as_bytes());
        hasher.finalize().into()
    }

    /// A fresh generator for the substream `name`.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key(name))
    }

    /// A 64-bit child seed for the substream `name`.
    pub fn derive(&self, name: &str) -> u64 {
        let key = self.key(name);
        u64::from_le_bytes(key[..8].try_into().expect("8 bytes"))
    }
}

impl Default for Seeder {
    fn default() -> Self {
        Self::new(DEFAULT_SEED)
    }
}

/// Sets the process-wide root seed used by [`stream`] and [`global_seeder`].
pub fn set_seed(seed: u64) {
    GLOBAL_SEED.store(seed, Ordering::SeqCst);
}

pub fn global_seeder() -> Seeder {
    Seeder::new(GLOBAL_SEED.load(Ordering::SeqCst))
}

/// Substream `name` of the process-wide root seed.
pub fn stream(name: &str) -> ChaCha8Rng {
    global_seeder().stream(name)
}
