//! Seed derivation. One root seed is split into independent per-stage seeds
//! by hashing the stage name together with the root (counter-based, so the
//! seed of one stage never depends on how much randomness another consumed).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a named stage under `root`.
pub fn derive_seed(root: u64, stage: &str) -> u64 {
    // FNV-1a over the stage label
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(root) ^ h)
}

/// Seed for the `index`-th item of a stage (e.g. per-severity corruption).
pub fn derive_indexed(root: u64, stage: &str, index: u64) -> u64 {
    splitmix64(derive_seed(root, stage).wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
