//! Sequential vs grouped TT materialization timings.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;
use ttzo::rng::normals;
use ttzo::tensor_train::{materialize_parallel, materialize_sequential, TtError, TtFactors, TtSpec, REFERENCE_SHAPES};

/// Largest allowed deviation of a grouped result from the sequential one.
pub const TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub m: usize,
    pub n: usize,
    pub modes: Vec<usize>,
    pub rank: usize,
    pub param_count: usize,
    /// 1 means the sequential chain.
    pub parts: usize,
    pub median_ms: f64,
    pub max_abs_diff: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Tt(#[from] TtError),
    #[error("{modes:?} r={rank} parts={parts}: grouped result deviates by {diff:e} (limit {TOLERANCE:e})")]
    Mismatch { modes: Vec<usize>, rank: usize, parts: usize, diff: f64 },
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Benchmarks `rows` of the reference shape table at each rank with
/// `parts` in `{1, 2, 3}`. Correctness is checked before anything is timed.
pub fn run(rows: &[usize], ranks: &[usize], reps: usize, seed: u64) -> Result<Vec<BenchRow>, BenchError> {
    let reps = reps.max(1);
    let mut out = Vec::new();
    for &row in rows {
        let (m, n, modes) = REFERENCE_SHAPES[row];
        for &rank in ranks {
            let spec = TtSpec::from_modes(&modes, rank)?;
            let factors = TtFactors::from_flat(&spec, &normals(seed ^ row as u64, spec.param_count()))?;
            let reference = materialize_sequential(&factors, &spec)?;
            for parts in [1, 2, 3] {
                let contract = || {
                    if parts == 1 {
                        materialize_sequential(&factors, &spec)
                    } else {
                        materialize_parallel(&factors, &spec, parts)
                    }
                };
                let w = contract()?;
                let diff = w.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                if diff > TOLERANCE {
                    return Err(BenchError::Mismatch { modes: modes.to_vec(), rank, parts, diff });
                }
                let times = (0..reps)
                    .map(|_| {
                        let t = Instant::now();
                        let w = contract();
                        let ms = t.elapsed().as_secs_f64() * 1e3;
                        drop(w);
                        ms
                    })
                    .collect();
                out.push(BenchRow {
                    m,
                    n,
                    modes: modes.to_vec(),
                    rank,
                    param_count: spec.param_count(),
                    parts,
                    median_ms: median(times),
                    max_abs_diff: diff,
                });
            }
        }
    }
    Ok(out)
}

pub fn to_tsv(rows: &[BenchRow]) -> String {
    let mut out = String::from("m\tn\tmodes\trank\tparams\tparts\tmedian_ms\tmax_abs_diff\n");
    for r in rows {
        let modes = r.modes.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(
            out,
            "{}\t{}\t[{modes}]\t{}\t{}\t{}\t{:.4}\t{:e}",
            r.m, r.n, r.rank, r.param_count, r.parts, r.median_ms, r.max_abs_diff
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_combination_gets_a_row() {
        let all: Vec<usize> = (0..REFERENCE_SHAPES.len()).collect();
        let rows = run(&all, &[5], 1, 0).unwrap();
        assert_eq!(rows.len(), REFERENCE_SHAPES.len() * 3);
        assert!(rows.iter().all(|r| r.max_abs_diff <= TOLERANCE));
        assert_eq!(to_tsv(&rows).lines().count(), rows.len() + 1);
    }

    #[test]
    fn rank_sweep_counts_grow() {
        let rows = run(&[1], &[5, 8, 16], 1, 0).unwrap();
        let counts: Vec<usize> = rows.iter().filter(|r| r.parts == 1).map(|r| r.param_count).collect();
        assert_eq!(counts, vec![1100, 2720, 10560]);
    }
}
