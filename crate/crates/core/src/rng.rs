//! Per-item random streams derived from a single master seed.
//!
//! A stream is addressed by `(master_seed, stage, index)`. The triple is
//! hashed with SHA-256 and the digest seeds a ChaCha8 generator, so every
//! item of every stage gets an independent stream that does not depend on
//! the order in which items are processed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A reproducible random stream for one `(stage, index)` item.
#[derive(Clone, Debug)]
pub struct RngStream {
    key: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    /// The 64-bit key identifying this stream (first 8 bytes of the seed hash).
    pub fn key(&self) -> u64 {
        self.key
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn seed_material(master_seed: u64, stage: &str, index: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"synthcomp.rng.v1");
    hasher.update(master_seed.to_le_bytes());
    // length prefix keeps ("ab", 1) and ("a", ...) from sharing a preimage
    hasher.update((stage.len() as u64).to_le_bytes());
    hasher.update(stage.as_bytes());
    hasher.update(index.to_le_bytes());
    hasher.finalize().into()
}

/// 64-bit keyed hash of `(master_seed, stage, index)`.
pub fn stream_key(master_seed: u64, stage: &str, index: u64) -> u64 {
    let seed = seed_material(master_seed, stage, index);
    u64::from_le_bytes(seed[..8].try_into().unwrap())
}

/// Derive the stream for `(stage, index)` under `master_seed`.
pub fn derive_rng(master_seed: u64, stage: &str, index: u64) -> RngStream {
    let seed = seed_material(master_seed, stage, index);
    RngStream {
        key: u64::from_le_bytes(seed[..8].try_into().unwrap()),
        inner: ChaCha8Rng::from_seed(seed),
    }
}

/// Derive a plain 64-bit sub-seed, e.g. to hand to a generation backend.
pub fn derive_seed(master_seed: u64, stage: &str, index: u64) -> u64 {
    derive_rng(master_seed, stage, index).next_u64()
}
