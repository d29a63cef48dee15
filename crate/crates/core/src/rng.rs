//! Named random streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const CODEC_INIT: &str = "codec-init";
pub const DATA_SHUFFLE: &str = "data-shuffle";
pub const POLICY_INIT: &str = "policy-init";
pub const ENV: &str = "env";
/// Action sampling during policy-gradient rollouts.
pub const SAMPLING: &str = "sampling";

/// Stable 64-bit hash of `(seed, name, index)`.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

/// Independent generator for stream `name`, sub-stream `index`.
pub fn stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name, index))
}
