use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Slot letter for display position `i` (0 -> "A").
pub fn slot_label(i: usize) -> String {
    assert!(i < 26, "at most 26 report slots");
    char::from(b'A' + i as u8).to_string()
}

/// Order in which the `n` registered reports of a case are shown to a
/// reviewer: position `i` (slot `slot_label(i)`) shows report `perm[i]`.
///
/// The shuffle is seeded from SHA-256 over the seed and length-prefixed ids,
/// so it is stable across requests and independent between cases.
pub fn blinding_permutation(seed: u64, case_id: &str, reviewer_id: &str, n: usize) -> Vec<usize> {
    let mut h = Sha256::new();
    h.update(b"blinding/v1");
    h.update(seed.to_le_bytes());
    for part in [case_id, reviewer_id] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    let key: [u8; 32] = h.finalize().into();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::from_seed(key));
    perm
}
