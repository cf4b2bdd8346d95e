//! Deterministic random-source derivation.
//!
//! Every run hangs off a single `u64` seed. Independent streams (weight init,
//! per-epoch data order, attack parameters, ...) are derived by hashing the
//! seed together with a string label, so adding a consumer never perturbs the
//! draws seen by existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// The RNG used throughout the crate. ChaCha output is identical on every
/// platform, which is what makes deterministic mode reproducible.
pub type Rng = ChaCha12Rng;

/// Derive an independent stream from `(seed, label)`.
pub fn derive_rng(seed: u64, label: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha12Rng::from_seed(key)
}
