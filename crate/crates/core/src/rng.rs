//! Seed derivation and standard normal streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// SplitMix64 finalizer.
#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a stream index into a master seed.
pub fn mix_seed(master: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(master) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Sub-seed for replicate `replicate` of the study at `n` periods. Depends
/// only on its arguments, never on scheduling.
pub fn replicate_seed(master: u64, n_periods: u64, replicate: u64) -> u64 {
    mix_seed(mix_seed(master, n_periods), replicate)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fills `out` with independent standard normals drawn from `seed`.
pub fn fill_standard_normal(seed: u64, out: &mut [f64]) {
    let mut rng = rng_from_seed(seed);
    for v in out.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
}

pub fn standard_normals(seed: u64, count: usize) -> Vec<f64> {
    let mut out = vec![0.0; count];
    fill_standard_normal(seed, &mut out);
    out
}
