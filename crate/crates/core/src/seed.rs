//! Seed derivation: every randomized component draws from the single root
//! seed through a named split, so components can be varied independently.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives a component seed from the root seed and a label (SplitMix64-style
/// mixing over the label bytes).
pub fn derive(root: u64, label: &str) -> u64 {
    let mut h = root ^ 0x9e37_79b9_7f4a_7c15;
    for &b in label.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
    }
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Derives a seed indexed by position (e.g. per MPC step, per scenario batch).
pub fn derive_indexed(root: u64, label: &str, index: u64) -> u64 {
    derive(derive(root, label).wrapping_add(index.wrapping_mul(0xd6e8_feb8_6659_fd93)), label)
}

/// Deterministic RNG for a named component.
pub fn rng(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, label))
}
