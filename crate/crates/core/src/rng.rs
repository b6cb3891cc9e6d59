//! Seed derivation and categorical sampling.
//!
//! Every stochastic stage derives an independent ChaCha stream from
//! `(base seed, stream index)`, so results do not depend on how work is
//! scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: u64) -> u64 {
    mix(mix(base) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn rng_from(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sub_rng(base: u64, stream: u64) -> SimRng {
    rng_from(derive_seed(base, stream))
}

/// Inverse-CDF draw from an (approximately) normalized probability row.
///
/// Falls back to the last index with positive mass when rounding leaves the
/// uniform draw above the accumulated total.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Same as [`sample_index`] over a sparse `(index, probability)` row.
pub fn sample_sparse<R: Rng + ?Sized>(row: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = row.first().map(|&(i, _)| i).unwrap_or(0);
    for &(i, p) in row {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}
