//! Seed derivation. Every random stream is keyed by (global seed, block id,
//! stream tag), so adding or removing a layer never shifts another layer's data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(global: u64, block_id: &str, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update((block_id.len() as u64).to_le_bytes());
    h.update(block_id.as_bytes());
    h.update(stream.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

pub fn stream_rng(global: u64, block_id: &str, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, block_id, stream))
}
