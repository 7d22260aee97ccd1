//! Labelled seed derivation. Every random stream in a run is seeded from
//! `(master seed, role, index)` so streams are independent and reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn derive_seed(master: u64, role: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"fedsynth/seed/v1");
    h.update(master.to_le_bytes());
    h.update((role.len() as u64).to_le_bytes());
    h.update(role.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_stream(master: u64, role: &str, index: u64) -> StreamRng {
    stream(derive_seed(master, role, index))
}
