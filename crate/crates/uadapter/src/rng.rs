//! Seeded random streams.
//!
//! All randomness in the crate flows through [`RngTree`]: one root seed
//! spawns independently seeded, named sub-streams (`"data"`, `"init"`,
//! `"noise"`, `"shuffle"`, ...). Adding a new consumer never perturbs the
//! draws seen by existing ones, and every stream is reproducible from
//! `(root seed, name, index)` alone.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Spawns named, deterministic random streams from a single root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngTree {
    seed: u64,
}

impl RngTree {
    pub fn new(seed: u64) -> Self {
        RngTree { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A stream identified by name alone.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        self.stream_indexed(name, 0)
    }

    /// A stream identified by (name, index), e.g. per-epoch shuffles or
    /// per-graph perturbations.
    pub fn stream_indexed(&self, name: &str, index: u64) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update([0x1f]);
        hasher.update(name.as_bytes());
        hasher.update([0x1f]);
        hasher.update(index.to_le_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }

    /// A child tree, for components that spawn their own sub-streams.
    pub fn child(&self, name: &str) -> RngTree {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update([0x2f]);
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        RngTree {
            seed: u64::from_le_bytes(bytes),
        }
    }
}
