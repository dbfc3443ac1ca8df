//! Two configurations over the same seeds, run concurrently.

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};
use crate::experiment::{run_train, RunError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub diverged: bool,
    pub steps_to_threshold: Option<u64>,
    pub wall_ms_to_threshold: Option<f64>,
    pub best_eval_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmReport {
    pub label: String,
    pub runs: Vec<SeedResult>,
    pub divergence_rate: f64,
    /// Runs that never reach the threshold count as infinitely slow, so the
    /// median is `None` when at least half of them never got there.
    pub median_steps_to_threshold: Option<f64>,
    pub median_wall_ms_to_threshold: Option<f64>,
    pub reached: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub seeds: u64,
    pub threshold: f64,
    pub arms: [ArmReport; 2],
}

/// Median with `None` as `+inf`.
pub fn median_or_inf(values: &[Option<f64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.iter().map(|x| x.unwrap_or(f64::INFINITY)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    m.is_finite().then_some(m)
}

fn arm(label: &str, runs: Vec<SeedResult>) -> ArmReport {
    let n = runs.len();
    let steps: Vec<Option<f64>> = runs.iter().map(|r| r.steps_to_threshold.map(|s| s as f64)).collect();
    let wall: Vec<Option<f64>> = runs.iter().map(|r| r.wall_ms_to_threshold).collect();
    ArmReport {
        label: label.into(),
        divergence_rate: runs.iter().filter(|r| r.diverged).count() as f64 / n as f64,
        median_steps_to_threshold: median_or_inf(&steps),
        median_wall_ms_to_threshold: median_or_inf(&wall),
        reached: runs.iter().filter(|r| r.steps_to_threshold.is_some()).count(),
        runs,
    }
}

/// Runs seeds `0..seeds` for both arms. Timing is always recorded here.
pub fn run_compare(a: &RunConfig, b: &RunConfig, seeds: u64) -> Result<CompareReport, RunError> {
    if seeds == 0 {
        return Err(ConfigError::Invalid("compare needs at least one seed".into()).into());
    }
    if a.task.kind != b.task.kind || a.model.kind != b.model.kind {
        return Err(ConfigError::Invalid("both arms must share task and model kind".into()).into());
    }
    let threshold = a.task.threshold;
    let arms: Vec<RunConfig> = [a, b]
        .iter()
        .map(|c| {
            let mut c = (*c).clone();
            c.train.record_timing = true;
            c.task.threshold = threshold;
            c
        })
        .collect();
    let jobs: Vec<(usize, u64)> = (0..2).flat_map(|i| (0..seeds).map(move |s| (i, s))).collect();
    let results = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let s = run_train(&arms[i], seed, None)?.summary;
            Ok((
                i,
                SeedResult {
                    seed,
                    diverged: s.diverged,
                    steps_to_threshold: s.steps_to_threshold,
                    wall_ms_to_threshold: s.wall_ms_to_threshold,
                    best_eval_loss: s.best_eval_loss,
                },
            ))
        })
        .collect::<Result<Vec<_>, RunError>>()?;
    let split = |i: usize| results.iter().filter(|r| r.0 == i).map(|r| r.1.clone()).collect::<Vec<_>>();
    Ok(CompareReport { seeds, threshold, arms: [arm("A", split(0)), arm("B", split(1))] })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_treats_missing_as_infinite() {
        assert_eq!(median_or_inf(&[Some(3.0), None, Some(1.0)]), Some(3.0));
        assert_eq!(median_or_inf(&[Some(2.0), Some(4.0)]), Some(3.0));
        assert_eq!(median_or_inf(&[Some(2.0), None]), None);
        assert_eq!(median_or_inf(&[]), None);
    }

    #[test]
    fn zero_seeds_is_rejected() {
        let cfg = RunConfig::default();
        assert!(matches!(run_compare(&cfg, &cfg, 0), Err(RunError::Config(_))));
    }
}
