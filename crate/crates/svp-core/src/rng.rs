//! Derived deterministic RNG streams.
//!
//! Every stochastic operation draws from a `ChaCha8Rng` whose seed is a
//! hash of a root seed plus a list of domain tags (scene index, sample
//! index, role, ...). Streams are therefore independent of evaluation
//! order, which is what makes the parallel and sequential lanes, and the
//! in-process and remote lanes, bit-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Domain tags separating unrelated stream families.
pub mod domain {
    pub const SCENE: u64 = 1;
    pub const OBSERVE: u64 = 2;
    pub const PRIOR_SAMPLE: u64 = 3;
    pub const GROUND: u64 = 4;
    pub const GUIDED_SAMPLE: u64 = 5;
    pub const PARAM_INIT: u64 = 6;
    pub const EVAL_PRIOR: u64 = 7;
    pub const EVAL_CAPTION: u64 = 8;
}

/// Hash a root seed and tag list down to a 64-bit stream seed.
pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    for tag in tags {
        hasher.update(tag.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// RNG for a derived stream.
pub fn stream(root: u64, tags: &[u64]) -> ChaCha8Rng {
    rng_from_seed(derive_seed(root, tags))
}

/// RNG from an already-derived 64-bit seed (the form that crosses the wire).
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
