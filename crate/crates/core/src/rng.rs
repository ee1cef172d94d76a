//! Deterministic seed derivation. Every random draw in the pipeline comes
//! from a ChaCha stream whose seed is a SHA-256 digest of the root seed and a
//! stream label, so adding a consumer never shifts another consumer's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Hash a root seed together with labelled parts into a new 64-bit seed.
pub fn derive_seed(root: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Named substream of a root seed (`"dataset"`, `"init"`, `"task-sampling"`, ...).
pub fn substream(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(root, &[name.as_bytes()]))
}

/// Per-clip stream: independent of generation order.
pub fn clip_stream(dataset_seed: u64, room_id: &str, clip_idx: usize) -> Rng {
    Rng::seed_from_u64(derive_seed(
        dataset_seed,
        &[room_id.as_bytes(), &(clip_idx as u64).to_le_bytes()],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = substream(7, "init").random();
        let b: u64 = substream(7, "init").random();
        let c: u64 = substream(7, "dataset").random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_seed(1, &[b"ab", b"c"]), derive_seed(1, &[b"a", b"bc"]));
    }
}
