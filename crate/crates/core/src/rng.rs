//! Named sub-seeds derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const SAMPLING: &str = "sampling";

/// First 8 bytes of `SHA-256(seed_le ‖ name)`.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest length"))
}

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, name))
}
