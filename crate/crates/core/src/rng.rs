//! Seed derivation and the replayable Gaussian perturbation stream.
//!
//! The exact stream is part of the artifact contract: in-place perturbation
//! is undone by regenerating the same normals from the same seed, so the
//! generator and the normal transform must never change silently. A golden
//! vector test pins both.
//!
//! * Generator: ChaCha8, seeded through `SeedableRng::seed_from_u64`.
//! * Uniforms: the top 53 bits of `next_u64`, `u1 = (x + 1) / 2^53` in
//!   `(0, 1]` and `u2 = y / 2^53` in `[0, 1)`.
//! * Normals: Box-Muller, `sqrt(-2 ln u1) * cos(2 pi u2)` first, then the
//!   matching `sin` term.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 output function.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `mix64(run_seed, k, q)`: chained SplitMix64 over the three words.
///
/// For a fixed `(run_seed, k)` the map `q -> seed` is a bijection.
pub fn mix64(run_seed: u64, k: u64, q: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(run_seed) ^ k) ^ q)
}

/// Domain tags so that data shuffling, initialization and perturbations never
/// share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Perturbation = 0,
    Shuffle = 1,
    Init = 2,
    Data = 3,
    Probe = 4,
}

/// Derives an independent seed for `(domain, a, b)` under a run seed.
pub fn derive_seed(run_seed: u64, domain: Domain, a: u64, b: u64) -> u64 {
    match domain {
        Domain::Perturbation => mix64(run_seed, a, b),
        other => mix64(splitmix64(run_seed ^ (other as u64).wrapping_mul(GOLDEN_GAMMA)), a, b),
    }
}

/// Per-query perturbation seed `s_q` for step `k` and query `q`.
pub fn query_seed(run_seed: u64, step: u64, query: u64) -> u64 {
    derive_seed(run_seed, Domain::Perturbation, step, query)
}

/// Deterministic standard-normal stream.
#[derive(Debug, Clone)]
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

const INV_2_53: f64 = 1.0 / (1u64 << 53) as f64;

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    /// Uniform in `[0, 1)`.
    pub fn next_uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * INV_2_53
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = ((self.rng.next_u64() >> 11) + 1) as f64 * INV_2_53;
        let u2 = (self.rng.next_u64() >> 11) as f64 * INV_2_53;
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Uniform integer in `[0, bound)` by rejection.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let x = self.rng.next_u64();
            if x < zone {
                return x % bound;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

impl Iterator for GaussianStream {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        Some(self.next_normal())
    }
}

/// First `n` normals of the stream for `seed`.
pub fn normals(seed: u64, n: usize) -> Vec<f64> {
    GaussianStream::new(seed).take(n).collect()
}

/// Pinned prefix of the stream for a few seeds: `seed index bits value`.
pub const GOLDEN_NORMALS: &str = include_str!("../fixtures/golden_normals.txt");

/// Checks a golden table against the live generator. Values must agree to
/// within 2 ulp, leaving room for last-bit `ln`/`sin`/`cos` differences
/// between platform math libraries.
pub fn check_golden(table: &str) -> Result<usize, String> {
    let mut checked = 0;
    for (lineno, line) in table.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [seed, index, bits, _] = parts[..] else {
            return Err(format!("line {}: expected 4 fields", lineno + 1));
        };
        let bad = |what: &str| format!("line {}: bad {what}", lineno + 1);
        let seed: u64 = seed.parse().map_err(|_| bad("seed"))?;
        let index: usize = index.parse().map_err(|_| bad("index"))?;
        let want = f64::from_bits(u64::from_str_radix(bits, 16).map_err(|_| bad("bits"))?);
        let got = GaussianStream::new(seed).nth(index).expect("infinite stream");
        let ulps = (got.to_bits() as i64).wrapping_sub(want.to_bits() as i64).unsigned_abs();
        if got.is_sign_negative() != want.is_sign_negative() || ulps > 2 {
            return Err(format!("seed {seed} index {index}: stream gives {got:?}, golden table says {want:?}"));
        }
        checked += 1;
    }
    if checked == 0 {
        return Err("golden table is empty".into());
    }
    Ok(checked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn golden_vector_holds() {
        assert_eq!(check_golden(GOLDEN_NORMALS), Ok(40));
        let corrupted = GOLDEN_NORMALS.replacen("bfe9edc0972ca3e0", "bfe9edc0972ca4e0", 1);
        assert!(check_golden(&corrupted).is_err());
        assert!(check_golden("# nothing").is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        assert_eq!(normals(17, 101), normals(17, 101));
        assert_ne!(normals(17, 8), normals(18, 8));
    }

    #[test]
    fn derived_seeds_do_not_collide() {
        let mut seen = HashSet::with_capacity(1_000_000);
        for k in 0..1000u64 {
            for q in 0..1000u64 {
                assert!(seen.insert(query_seed(7, k, q)), "collision at k={k} q={q}");
            }
        }
    }

    #[test]
    fn domains_are_separated() {
        assert_ne!(derive_seed(1, Domain::Perturbation, 3, 4), derive_seed(1, Domain::Shuffle, 3, 4));
        assert_ne!(derive_seed(1, Domain::Init, 3, 4), derive_seed(1, Domain::Data, 3, 4));
    }

    #[test]
    fn moments_are_standard() {
        let n = 200_000;
        let xs = normals(3, n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        GaussianStream::new(5).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
