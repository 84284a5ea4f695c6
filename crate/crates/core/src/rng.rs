//! Seeded, splittable random streams.
//!
//! Every stochastic routine takes an explicit `seed`. Independent sub-streams
//! are addressed by `(seed, stream_id)` on a ChaCha8 counter generator, so a
//! Monte Carlo trial block can be regenerated in isolation and in any order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

/// Sub-stream `stream_id` of the family rooted at `seed`.
pub fn stream(seed: u64, stream_id: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Mixes a tag into a seed (splitmix64 finalizer). Used to derive the seed of
/// a nested family, e.g. per-layer key sets.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

#[inline]
pub fn rademacher<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, len: usize, std_dev: f64) -> Vec<f64> {
    (0..len).map(|_| gaussian(rng) * std_dev).collect()
}

pub fn bipolar_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rademacher(rng)).collect()
}

/// Uniform sample on the unit sphere S^{d-1}: a normalized Gaussian vector.
/// A zero draw is rejected and redrawn.
pub fn unit_sphere<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let mut v = gaussian_vec(rng, d, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

/// Uniform on `[lo, hi)`.
pub fn uniform_vec<R: Rng + ?Sized>(rng: &mut R, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
}
