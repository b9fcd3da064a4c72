//! Seeded random streams. Every source of randomness in the harness is a
//! `ChaCha8Rng` derived from an experiment seed plus a string tag, so two
//! runs with equal seeds produce bit-identical trajectories.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fold a tag and index into a base seed (FNV-1a), so that e.g.
/// `("train", task=3)` and `("coreset", task=3)` never collide.
pub fn derive(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^= index.wrapping_mul(0x9e3779b97f4a7c15);
    h = h.wrapping_mul(0x100000001b3);
    seed ^ h
}

/// Derive an independent named stream from a base seed.
pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, index))
}

/// Plain stream for callers that manage their own tags.
pub fn from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible() {
        let mut a = stream(7, "train", 2);
        let mut b = stream(7, "train", 2);
        for _ in 0..16 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn tags_and_indices_separate_streams() {
        let a: u64 = stream(7, "train", 2).random();
        let b: u64 = stream(7, "eval", 2).random();
        let c: u64 = stream(7, "train", 3).random();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
