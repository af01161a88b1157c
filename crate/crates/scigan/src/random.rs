//! Seeded randomness helpers.
//!
//! Every run owns a single [`RunRng`] (a ChaCha stream) so that a fixed seed
//! reproduces results bit-for-bit. The distribution samplers are hand-rolled
//! on top of the raw uniform stream — Box-Muller normals, Marsaglia-Tsang
//! gammas, and Beta draws via the two-gamma ratio — keeping the draw
//! sequence under this crate's control rather than a dependency's.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type RunRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> RunRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw on the half-open unit interval.
pub fn uniform01(rng: &mut impl Rng) -> f64 {
    rng.gen::<f64>()
}

/// Uniform draw on `[lo, hi)`.
pub fn uniform_in(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform01(rng)
}

/// Standard normal via Box-Muller (one draw per call; the sine twin is
/// discarded to keep the call sequence simple and deterministic).
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    // u1 in (0, 1] so the log is finite.
    let u1 = 1.0 - uniform01(rng);
    let u2 = uniform01(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn normal(rng: &mut impl Rng, mean: f64, sd: f64) -> f64 {
    mean + sd * standard_normal(rng)
}

/// Gamma(shape, 1) via Marsaglia-Tsang squeeze; shapes below one use the
/// boost `Gamma(a) = Gamma(a + 1) * U^(1/a)`.
pub fn gamma(rng: &mut impl Rng, shape: f64) -> f64 {
    assert!(shape > 0.0 && shape.is_finite(), "gamma shape must be positive");
    if shape < 1.0 {
        let boost = uniform01(rng).max(f64::MIN_POSITIVE).powf(1.0 / shape);
        return gamma(rng, shape + 1.0) * boost;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = standard_normal(rng);
        let v = (1.0 + c * x).powi(3);
        if v <= 0.0 {
            continue;
        }
        let u = uniform01(rng);
        if u < 1.0 - 0.0331 * x.powi(4) {
            return d * v;
        }
        if u.max(f64::MIN_POSITIVE).ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Beta(a, b) as `Ga / (Ga + Gb)` with independent gamma draws.
pub fn beta(rng: &mut impl Rng, a: f64, b: f64) -> f64 {
    let ga = gamma(rng, a);
    let gb = gamma(rng, b);
    if ga + gb == 0.0 {
        return 0.5;
    }
    ga / (ga + gb)
}

/// Sample from a categorical distribution given probabilities summing to one.
pub fn categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
    debug_assert!(!probs.is_empty());
    let u = uniform01(rng);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// `count` distinct indices drawn uniformly from `0..n` (partial Fisher-Yates).
pub fn sample_distinct(rng: &mut impl Rng, n: usize, count: usize) -> Vec<usize> {
    assert!(count <= n, "cannot draw {count} distinct from {n}");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = i + rng.gen_range(0..n - i);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut impl Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_reproduces_stream() {
        let mut a = rng_from_seed(7);
        let mut b = rng_from_seed(7);
        for _ in 0..100 {
            assert_eq!(uniform01(&mut a), uniform01(&mut b));
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = rng_from_seed(11);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        // 3-sigma Monte-Carlo bounds: sd(mean) = 1/sqrt(n), sd(var) ~ sqrt(2/n).
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "var {var}");
    }

    #[test]
    fn gamma_mean_matches_shape() {
        let mut rng = rng_from_seed(13);
        for &shape in &[0.5, 1.0, 2.0, 7.5] {
            let n = 50_000;
            let mean = (0..n).map(|_| gamma(&mut rng, shape)).sum::<f64>() / n as f64;
            // Gamma(shape, 1) has mean = shape, var = shape.
            let bound = 4.0 * (shape / n as f64).sqrt();
            assert!((mean - shape).abs() < bound, "shape {shape}: mean {mean}");
        }
    }

    #[test]
    fn beta_mean_and_range() {
        let mut rng = rng_from_seed(17);
        let (a, b) = (2.0, 6.0);
        let n = 50_000;
        let draws: Vec<f64> = (0..n).map(|_| beta(&mut rng, a, b)).collect();
        assert!(draws.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let mean = draws.iter().sum::<f64>() / n as f64;
        let expected = a / (a + b);
        let var = expected * (1.0 - expected) / (a + b + 1.0);
        assert!((mean - expected).abs() < 4.0 * (var / n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn categorical_respects_probabilities() {
        let mut rng = rng_from_seed(19);
        let probs = [0.2, 0.5, 0.3];
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[categorical(&mut rng, &probs)] += 1;
        }
        for (i, &p) in probs.iter().enumerate() {
            let freq = counts[i] as f64 / n as f64;
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() < 4.0 * sd, "index {i}: freq {freq}");
        }
    }

    #[test]
    fn sample_distinct_is_distinct_and_in_range() {
        let mut rng = rng_from_seed(23);
        for _ in 0..100 {
            let picked = sample_distinct(&mut rng, 10, 5);
            let mut sorted = picked.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 5);
            assert!(picked.iter().all(|&i| i < 10));
        }
    }
}
