//! Seed derivation and the generator type used everywhere in the crate.
//!
//! Every random stream is a ChaCha8 generator keyed by a 64-bit seed derived
//! from `(master seed, purpose, indices...)`, so independent streams never
//! share state and results do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of components into a new seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Stable 64-bit tag for a purpose string, used as a seed component.
pub fn tag(label: &str) -> u64 {
    // FNV-1a
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for `purpose` under `base`, further keyed by `parts`.
pub fn stream(base: u64, purpose: &str, parts: &[u64]) -> Rng {
    let mut all = Vec::with_capacity(parts.len() + 1);
    all.push(tag(purpose));
    all.extend_from_slice(parts);
    rng_from(derive_seed(base, &all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derived_seeds_depend_on_every_component() {
        let a = derive_seed(7, &[1, 2, 3]);
        assert_eq!(a, derive_seed(7, &[1, 2, 3]));
        assert_ne!(a, derive_seed(7, &[1, 2, 4]));
        assert_ne!(a, derive_seed(7, &[2, 1, 3]));
        assert_ne!(a, derive_seed(8, &[1, 2, 3]));
    }

    #[test]
    fn streams_are_reproducible() {
        let x: u64 = stream(1, "aug", &[0]).random();
        let y: u64 = stream(1, "aug", &[0]).random();
        let z: u64 = stream(1, "dropout", &[0]).random();
        assert_eq!(x, y);
        assert_ne!(x, z);
    }
}
