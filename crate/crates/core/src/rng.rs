//! Seeded, splittable randomness. No routine in the crate touches a global generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derives an independent seed from a master seed and any labels.
///
/// Used as `derive_seed(master, &[utt_id, epoch])` so per-utterance work can
/// run in any order and still reproduce bit-exactly.
pub fn derive_seed(master: u64, parts: &[&dyn std::fmt::Display]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for p in parts {
        h.update([0x1f]);
        h.update(p.to_string().as_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}

pub fn derived(master: u64, parts: &[&dyn std::fmt::Display]) -> Rng {
    seeded(derive_seed(master, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derivation_is_stable_and_label_sensitive() {
        let a = derive_seed(7, &[&"utt1", &3]);
        assert_eq!(a, derive_seed(7, &[&"utt1", &3]));
        assert_ne!(a, derive_seed(7, &[&"utt1", &4]));
        assert_ne!(a, derive_seed(8, &[&"utt1", &3]));
        // separator keeps ("ab","c") and ("a","bc") apart
        assert_ne!(derive_seed(1, &[&"ab", &"c"]), derive_seed(1, &[&"a", &"bc"]));
    }

    #[test]
    fn seeded_streams_repeat() {
        let x: Vec<u32> = seeded(42).random_iter().take(4).collect();
        let y: Vec<u32> = seeded(42).random_iter().take(4).collect();
        assert_eq!(x, y);
    }
}
