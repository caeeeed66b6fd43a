//! Seed derivation. Every random draw in the crate comes from a ChaCha stream
//! keyed by the run seed plus a purpose label, so results never depend on
//! scheduling order or on how far a previous run progressed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Stable 64-bit FNV-1a; `std`'s hasher is not stable across releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// splitmix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a sub-seed from a base seed and a list of labels.
pub fn derive(seed: u64, labels: &[&str]) -> u64 {
    labels
        .iter()
        .fold(mix(seed), |acc, l| mix(acc ^ fnv1a(l.as_bytes())))
}

pub fn derive_n(seed: u64, labels: &[&str], n: u64) -> u64 {
    mix(derive(seed, labels) ^ mix(n))
}

pub fn stream(seed: u64, labels: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, labels))
}

/// Uniform value in [0, 1) from a hash, for per-pixel decisions that must be
/// identical no matter which box or call touches the pixel.
pub fn unit_hash(seed: u64, a: u64, b: u64) -> f64 {
    let h = mix(mix(seed ^ mix(a)) ^ b);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_label_sensitive() {
        let a: u64 = stream(7, &["x"]).random();
        let b: u64 = stream(7, &["x"]).random();
        let c: u64 = stream(7, &["y"]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn unit_hash_in_range() {
        for i in 0..1000 {
            let u = unit_hash(3, i, i * 7);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
