//! Seed fan-out and deterministic RNG construction.
//!
//! Every stage derives its own seed from the master seed, a stage name and
//! an index, so two runs that share a prefix of stages produce bit-identical
//! results for that prefix regardless of what runs afterwards.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// `hash(master, stage, index)` truncated to 64 bits.
pub fn derive_seed(master: u64, stage: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((stage.len() as u64).to_le_bytes());
    h.update(stage.as_bytes());
    h.update(index.to_le_bytes());
    let out = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&out[..8]);
    u64::from_le_bytes(b)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stage_rng(master: u64, stage: &str, index: u64) -> Rng {
    rng_from_seed(derive_seed(master, stage, index))
}
