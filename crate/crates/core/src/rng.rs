//! Seeded generators and stable seed derivation.
//!
//! Every random draw in the crate goes through a ChaCha stream keyed by a `u64`,
//! so a cell's output depends only on its seed and never on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable hash of (master seed, tag, indices) truncated to 64 bits.
pub fn derive_seed(master: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_separates_inputs() {
        let a = derive_seed(7, "train", &[1, 2]);
        assert_eq!(a, derive_seed(7, "train", &[1, 2]));
        assert_ne!(a, derive_seed(7, "train", &[2, 1]));
        assert_ne!(a, derive_seed(8, "train", &[1, 2]));
        assert_ne!(a, derive_seed(7, "mc", &[1, 2]));
    }
}
