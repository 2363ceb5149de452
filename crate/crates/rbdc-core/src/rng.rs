//! Seed derivation and weight-initialization sampling.
//!
//! All randomness in the crate flows through ChaCha8 seeded from a
//! `u64`, so every build, shuffle, and padding draw is reproducible
//! from the seed recorded in checkpoints and run records.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// Deterministic RNG used everywhere in the crate.
pub type Rng64 = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a child seed from a root seed and a tree path such as "0/1".
/// FNV-1a over the path bytes mixed with the root, finished with a
/// splitmix64 avalanche; stable across platforms so sibling leaves get
/// distinct, reproducible seeds.
pub fn derive_seed(root: u64, path: &str) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET ^ root;
    for byte in path.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One truncated-normal draw: N(0, std^2) rejected outside two standard
/// deviations (the usual transformer weight-init convention).
pub fn trunc_normal(rng: &mut Rng64, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("std must be finite and positive");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

/// Fill a buffer with truncated-normal draws.
pub fn trunc_normal_vec(rng: &mut Rng64, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| trunc_normal(rng, std)).collect()
}

/// Standard-normal draws (probes, synthetic data noise).
pub fn standard_normal_vec(rng: &mut Rng64, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Fisher-Yates shuffle of `0..n` driven by the given RNG.
pub fn shuffled_indices(rng: &mut Rng64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
