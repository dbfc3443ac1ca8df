//! Tensor-train (TT) weight representation.
//!
//! A dense `m x n` weight is stored as a chain of `2o` three-way cores
//! `G_t` of shape `(r_{t-1}, k_t, r_t)` with boundary ranks `r_0 = r_{2o} = 1`.
//! The first `o` modes factor the row dimension and the last `o` modes factor
//! the column dimension:
//!
//! ```text
//! W[i, j] = G_1[:, i_1, :] G_2[:, i_2, :] ... G_2o[:, j_o, :]
//! ```
//!
//! Row and column multi-indices are flattened row-major (last index fastest).
//! This layout is frozen: flat parameter offsets and replayed perturbations
//! depend on it.

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::GaussianStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TtError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty factor list")]
    EmptyFactorList,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad partition: {parts} groups requested for {cores} cores")]
    BadPartition { parts: usize, cores: usize },
    #[error("cannot factor {value} into {parts} factors")]
    Unfactorable { value: usize, parts: usize },
}

/// Shape of one TT-factored weight matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub in_factors: Vec<usize>,
    pub out_factors: Vec<usize>,
    pub rank: usize,
}

impl TtSpec {
    /// Builds and validates a spec.
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        in_factors: Vec<usize>,
        out_factors: Vec<usize>,
        rank: usize,
    ) -> Result<Self, TtError> {
        let spec = Self { in_dim, out_dim, in_factors, out_factors, rank };
        spec.validate()?;
        Ok(spec)
    }

    /// Builds a spec from a flat mode list `[k_1..k_o, k_{o+1}..k_2o]`,
    /// taking the dimensions as the products of each half.
    pub fn from_modes(modes: &[usize], rank: usize) -> Result<Self, TtError> {
        if modes.is_empty() {
            return Err(TtError::EmptyFactorList);
        }
        if !modes.len().is_multiple_of(2) {
            return Err(TtError::DimensionMismatch(format!("odd mode count {}", modes.len())));
        }
        let (inp, out) = modes.split_at(modes.len() / 2);
        Self::new(inp.iter().product(), out.iter().product(), inp.to_vec(), out.to_vec(), rank)
    }

    /// Greedy balanced factorization of `in_dim` and `out_dim` into `order`
    /// factors each.
    pub fn balanced(in_dim: usize, out_dim: usize, order: usize, rank: usize) -> Result<Self, TtError> {
        let in_factors = balanced_factors(in_dim, order)?;
        let out_factors = balanced_factors(out_dim, order)?;
        Self::new(in_dim, out_dim, in_factors, out_factors, rank)
    }

    pub fn validate(&self) -> Result<(), TtError> {
        if self.in_factors.is_empty() || self.out_factors.is_empty() {
            return Err(TtError::EmptyFactorList);
        }
        if self.in_factors.len() != self.out_factors.len() {
            return Err(TtError::DimensionMismatch(format!(
                "{} input factors vs {} output factors",
                self.in_factors.len(),
                self.out_factors.len()
            )));
        }
        if self.rank == 0 || self.in_dim == 0 || self.out_dim == 0 {
            return Err(TtError::DimensionMismatch("zero rank or dimension".into()));
        }
        if self.modes().any(|k| k == 0) {
            return Err(TtError::DimensionMismatch("zero mode size".into()));
        }
        let in_prod: usize = self.in_factors.iter().product();
        let out_prod: usize = self.out_factors.iter().product();
        if in_prod != self.in_dim {
            return Err(TtError::DimensionMismatch(format!(
                "input factors {:?} multiply to {in_prod}, expected {}",
                self.in_factors, self.in_dim
            )));
        }
        if out_prod != self.out_dim {
            return Err(TtError::DimensionMismatch(format!(
                "output factors {:?} multiply to {out_prod}, expected {}",
                self.out_factors, self.out_dim
            )));
        }
        Ok(())
    }

    /// Number of factors per side (`o`).
    pub fn order(&self) -> usize {
        self.in_factors.len()
    }

    pub fn num_cores(&self) -> usize {
        2 * self.order()
    }

    pub fn modes(&self) -> impl Iterator<Item = usize> + '_ {
        self.in_factors.iter().chain(self.out_factors.iter()).copied()
    }

    /// Rank vector `[1, r, ..., r, 1]` of length `2o + 1`.
    pub fn ranks(&self) -> Vec<usize> {
        let n = self.num_cores();
        (0..=n).map(|i| if i == 0 || i == n { 1 } else { self.rank }).collect()
    }

    pub fn core_shape(&self, t: usize) -> (usize, usize, usize) {
        let ranks = self.ranks();
        let k = self.modes().nth(t).expect("core index in range");
        (ranks[t], k, ranks[t + 1])
    }

    pub fn core_shapes(&self) -> Vec<(usize, usize, usize)> {
        (0..self.num_cores()).map(|t| self.core_shape(t)).collect()
    }

    /// `sum_t r_{t-1} k_t r_t`.
    pub fn param_count(&self) -> usize {
        self.core_shapes().iter().map(|(a, k, b)| a * k * b).sum()
    }

    pub fn dense_count(&self) -> usize {
        self.in_dim * self.out_dim
    }
}

fn balanced_factors(value: usize, parts: usize) -> Result<Vec<usize>, TtError> {
    if parts == 0 || value == 0 {
        return Err(TtError::Unfactorable { value, parts });
    }
    let mut primes = Vec::new();
    let mut rest = value;
    let mut p = 2;
    while p * p <= rest {
        while rest.is_multiple_of(p) {
            primes.push(p);
            rest /= p;
        }
        p += 1;
    }
    if rest > 1 {
        primes.push(rest);
    }
    // every mode must be a nontrivial factor
    if primes.len() < parts {
        return Err(TtError::Unfactorable { value, parts });
    }
    primes.sort_unstable_by(|a, b| b.cmp(a));
    let mut factors = vec![1usize; parts];
    for prime in primes {
        let slot = (0..parts).min_by_key(|&i| factors[i]).expect("parts > 0");
        factors[slot] *= prime;
    }
    factors.sort_unstable_by(|a, b| b.cmp(a));
    Ok(factors)
}

/// Ordered list of TT cores matching a [`TtSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct TtFactors {
    pub cores: Vec<Array3<f64>>,
}

impl TtFactors {
    pub fn zeros(spec: &TtSpec) -> Self {
        Self { cores: spec.core_shapes().into_iter().map(Array3::zeros).collect() }
    }

    /// Wraps a flat buffer laid out core after core, each core row-major.
    pub fn from_flat(spec: &TtSpec, flat: &[f64]) -> Result<Self, TtError> {
        if flat.len() != spec.param_count() {
            return Err(TtError::ShapeMismatch(format!(
                "flat buffer has {} values, spec needs {}",
                flat.len(),
                spec.param_count()
            )));
        }
        let mut offset = 0;
        let cores = spec
            .core_shapes()
            .into_iter()
            .map(|shape| {
                let len = shape.0 * shape.1 * shape.2;
                let core = Array3::from_shape_vec(shape, flat[offset..offset + len].to_vec()).expect("length checked");
                offset += len;
                core
            })
            .collect();
        Ok(Self { cores })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.cores.iter().flat_map(|c| c.iter().copied()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.cores.iter().map(|c| c.len()).sum()
    }

    pub fn check(&self, spec: &TtSpec) -> Result<(), TtError> {
        if self.cores.len() != spec.num_cores() {
            return Err(TtError::ShapeMismatch(format!("{} cores, spec needs {}", self.cores.len(), spec.num_cores())));
        }
        for (t, (core, want)) in self.cores.iter().zip(spec.core_shapes()).enumerate() {
            if core.dim() != want {
                return Err(TtError::ShapeMismatch(format!("core {t} has shape {:?}, expected {want:?}", core.dim())));
            }
        }
        Ok(())
    }
}

/// Reference adapter shapes `(m, n, modes)` for a 768/4096-wide backbone with
/// bottleneck 64 and 8. The 4096 x 8 row uses `[16, 16, 16, 2, 2, 2]`, since
/// `2 * 2 * 4` would not factor 8.
pub const REFERENCE_SHAPES: [(usize, usize, [usize; 6]); 8] = [
    (768, 64, [8, 8, 12, 4, 4, 4]),
    (4096, 64, [16, 16, 16, 4, 4, 4]),
    (64, 768, [4, 4, 4, 12, 8, 8]),
    (64, 4096, [4, 4, 4, 16, 16, 16]),
    (768, 8, [8, 8, 12, 2, 2, 2]),
    (4096, 8, [16, 16, 16, 2, 2, 2]),
    (8, 768, [2, 2, 2, 12, 8, 8]),
    (8, 4096, [2, 2, 2, 16, 16, 16]),
];

/// Contracts `a (l, p, r)` with `b (r, q, s)` into `(l, p*q, s)`.
fn merge(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>) -> Array3<f64> {
    let (l, p, r) = a.dim();
    let (r2, q, s) = b.dim();
    debug_assert_eq!(r, r2);
    let a2 = a.as_standard_layout().into_owned().into_shape_with_order((l * p, r)).expect("contiguous");
    let b2 = b.as_standard_layout().into_owned().into_shape_with_order((r, q * s)).expect("contiguous");
    a2.dot(&b2).into_shape_with_order((l, p * q, s)).expect("contiguous")
}

fn contract_chain(cores: &[Array3<f64>]) -> Array3<f64> {
    let mut iter = cores.iter();
    let first = iter.next().expect("non-empty chain").clone();
    iter.fold(first, |acc, core| merge(acc.view(), core.view()))
}

fn into_matrix(chain: Array3<f64>, spec: &TtSpec) -> Array2<f64> {
    debug_assert_eq!(chain.dim(), (1, spec.in_dim * spec.out_dim, 1));
    chain
        .index_axis_move(Axis(0), 0)
        .index_axis_move(Axis(1), 0)
        .into_shape_with_order((spec.in_dim, spec.out_dim))
        .expect("contiguous")
}

/// Left-to-right pairwise contraction of the whole chain.
pub fn materialize_sequential(factors: &TtFactors, spec: &TtSpec) -> Result<Array2<f64>, TtError> {
    factors.check(spec)?;
    Ok(into_matrix(contract_chain(&factors.cores), spec))
}

/// Contiguous group boundaries for `parts` near-equal groups over `cores`
/// cores. Earlier groups take the remainder, so two groups split exactly at
/// the row/column boundary.
pub fn partition(cores: usize, parts: usize) -> Result<Vec<std::ops::Range<usize>>, TtError> {
    if parts < 2 || parts > cores {
        return Err(TtError::BadPartition { parts, cores });
    }
    let base = cores / parts;
    let extra = cores % parts;
    let mut start = 0;
    Ok((0..parts)
        .map(|g| {
            let len = base + usize::from(g < extra);
            let range = start..start + len;
            start += len;
            range
        })
        .collect())
}

/// Grouped contraction: each contiguous group is contracted independently
/// (concurrently), then group results are combined left to right.
pub fn materialize_parallel(factors: &TtFactors, spec: &TtSpec, parts: usize) -> Result<Array2<f64>, TtError> {
    let groups = partition(spec.num_cores(), parts)?;
    factors.check(spec)?;
    let partials: Vec<Array3<f64>> =
        groups.into_par_iter().map(|range| contract_chain(&factors.cores[range])).collect();
    let mut iter = partials.into_iter();
    let first = iter.next().expect("at least two groups");
    let chain = iter.fold(first, |acc, part| merge(acc.view(), part.view()));
    Ok(into_matrix(chain, spec))
}

/// Gradient of `sum(dw * W)` with respect to every core, where `W` is the
/// materialized weight of `factors`. Used by the verification oracle.
pub fn core_gradients(factors: &TtFactors, spec: &TtSpec, dw: &Array2<f64>) -> Result<Vec<Array3<f64>>, TtError> {
    factors.check(spec)?;
    if dw.dim() != (spec.in_dim, spec.out_dim) {
        return Err(TtError::ShapeMismatch(format!(
            "upstream gradient {:?}, weight is {}x{}",
            dw.dim(),
            spec.in_dim,
            spec.out_dim
        )));
    }
    let n = spec.num_cores();
    let dw = dw.as_standard_layout();
    let flat = dw.as_slice().expect("standard layout");
    (0..n)
        .map(|t| {
            let (ra, k, rb) = spec.core_shape(t);
            // left: (P_l x r_{t-1}), right: (r_t x P_r)
            let left = if t == 0 {
                Array2::ones((1, 1))
            } else {
                let c = contract_chain(&factors.cores[..t]);
                let p = c.dim().1;
                c.into_shape_with_order((p, ra)).expect("contiguous")
            };
            let right = if t + 1 == n {
                Array2::ones((1, 1))
            } else {
                let c = contract_chain(&factors.cores[t + 1..]);
                let p = c.dim().1;
                c.into_shape_with_order((rb, p)).expect("contiguous")
            };
            let (pl, pr) = (left.nrows(), right.ncols());
            let dw3 = ndarray::ArrayView3::from_shape((pl, k, pr), flat).expect("sizes agree");
            let mut grad = Array3::zeros((ra, k, rb));
            for i in 0..k {
                let slice = dw3.index_axis(Axis(1), i);
                let g = left.t().dot(&slice).dot(&right.t());
                grad.index_axis_mut(Axis(1), i).assign(&g);
            }
            Ok(grad)
        })
        .collect()
}

/// Factor initialization policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitPolicy {
    /// i.i.d. normal entries, equal per-core std, scaled so the materialized
    /// weight has elementwise variance `2 / (m + n)`.
    BalancedGaussian,
    /// Balanced Gaussian with the final core zeroed: the materialized weight
    /// is exactly zero while every other core stays nonzero.
    ZeroUp,
    Zeros,
}

/// Per-core std for [`InitPolicy::BalancedGaussian`].
///
/// An entry of `W` is a sum of `r^(2o-1)` products of `2o` independent core
/// entries, so its variance is `r^(2o-1) * sigma^(4o)`.
pub fn balanced_core_std(spec: &TtSpec) -> f64 {
    let n = spec.num_cores() as f64;
    let target = 2.0 / (spec.in_dim + spec.out_dim) as f64;
    let paths = (spec.rank as f64).powf(n - 1.0);
    (target / paths).powf(1.0 / (2.0 * n))
}

pub fn init_factors(spec: &TtSpec, seed: u64, policy: InitPolicy) -> TtFactors {
    let mut factors = TtFactors::zeros(spec);
    if policy == InitPolicy::Zeros {
        return factors;
    }
    let std = balanced_core_std(spec);
    let mut stream = GaussianStream::new(seed);
    for core in factors.cores.iter_mut() {
        core.iter_mut().for_each(|v| *v = std * stream.next_normal());
    }
    if policy == InitPolicy::ZeroUp {
        factors.cores.last_mut().expect("non-empty").fill(0.0);
    }
    factors
}
