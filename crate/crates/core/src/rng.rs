use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `n` draws from N(0, sigma²).
pub(crate) fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, sigma: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Independent seed for a named sub-stream of a run seed (SplitMix64 step).
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
