//! Seedable, portable randomness. One ChaCha8 generator per purpose, all
//! derived from a single run seed via distinct stream ids, so every draw is
//! reproducible across platforms and independent of unrelated code paths.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Dataset generation (uses the dataset's own seed).
pub const STREAM_DATA: u64 = 0;
/// Model parameter initialization.
pub const STREAM_INIT: u64 = 1;
/// Batch sampling during training.
pub const STREAM_SAMPLER: u64 = 2;
/// Class-ratio subsetting.
pub const STREAM_SUBSET: u64 = 3;

pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard normal draw via Box-Muller; always consumes exactly two
/// uniforms, which keeps downstream draws aligned across platforms.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let mut a = seeded_stream(7, STREAM_DATA);
        let mut b = seeded_stream(7, STREAM_DATA);
        let mut c = seeded_stream(7, STREAM_INIT);
        let xa: f64 = a.gen();
        let xb: f64 = b.gen();
        let xc: f64 = c.gen();
        assert_eq!(xa.to_bits(), xb.to_bits());
        assert_ne!(xa.to_bits(), xc.to_bits());
    }

    #[test]
    fn normal_draws_have_sane_moments() {
        let mut rng = seeded_stream(123, STREAM_DATA);
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
