//! Seed derivation.
//!
//! Every random quantity in the crate is drawn from a ChaCha stream whose seed
//! is derived from a master seed plus a path of integer labels (repetition,
//! period, observation id, ...). Draws therefore never depend on evaluation
//! order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and a path of labels.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(mix64(seed), |acc, &label| mix64(acc ^ mix64(label)))
}

/// Stream tag hashed from a short string, for readable call sites.
pub fn tag(label: &str) -> u64 {
    label
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325_u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01B3)
        })
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Counter-based stream: the same `(seed, key)` always yields the same sequence.
pub fn keyed_rng(seed: u64, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_seeds_differ_by_path() {
        let a = derive_seed(1, &[0, 1]);
        let b = derive_seed(1, &[1, 0]);
        let c = derive_seed(1, &[0, 1]);
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn keyed_streams_are_independent_of_order() {
        let x: f64 = keyed_rng(9, 3).random();
        let _ = keyed_rng(9, 4).random::<f64>();
        let y: f64 = keyed_rng(9, 3).random();
        assert_eq!(x, y);
        let z: f64 = keyed_rng(9, 4).random();
        assert_ne!(x, z);
    }
}
