//! Gradient-noise tables from `variance_probe`.

use std::fmt::Write as _;

use serde::Serialize;
use ttzo::rng::{derive_seed, normals, Domain};
use ttzo::toy_models::{collect_trainable, make_synthetic, QuadraticProbe, SyntheticParams, TaskKind};
use ttzo::zo_engine::{variance_probe, EngineError};

use crate::config::RunConfig;
use crate::experiment::{build, RunError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceLine {
    pub d: usize,
    pub q: usize,
    pub variance: f64,
    pub ci95: f64,
    pub trials: usize,
    /// Closed form where one exists: `(d + 1) ||w||^2 / Q` for the quadratic.
    pub analytic: Option<f64>,
}

/// Quadratic probe at a random unit-norm `w` for every `(d, Q)` pair.
pub fn quadratic_sweep(
    dims: &[usize],
    q_list: &[usize],
    trials: usize,
    epsilon: f64,
    seed: u64,
) -> Result<Vec<VarianceLine>, EngineError> {
    let batch = make_synthetic(TaskKind::QuadraticProbe, 2, seed, &SyntheticParams::default())?.full_batch();
    let mut lines = Vec::new();
    for &d in dims {
        let mut w = normals(derive_seed(seed, Domain::Init, d as u64, 0), d);
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        w.iter_mut().for_each(|v| *v /= norm);
        let model = QuadraticProbe::new(&w);
        for row in variance_probe(&model, &w, epsilon, &batch, q_list, trials, seed, Some(&w))? {
            lines.push(VarianceLine {
                d,
                q: row.q,
                variance: row.variance,
                ci95: row.ci95,
                trials: row.trials,
                analytic: Some((d + 1) as f64 / row.q as f64),
            });
        }
    }
    Ok(lines)
}

/// A configured model at its initial weights on the first training batch.
/// The reference is the analytic gradient when the model has one.
pub fn model_probe(cfg: &RunConfig, q_list: &[usize], trials: usize, seed: u64) -> Result<Vec<VarianceLine>, RunError> {
    let exp = build(cfg, seed)?;
    let w = collect_trainable(exp.model.as_ref()).read_flat();
    let idx: Vec<usize> = (0..cfg.train.batch_size.min(exp.train.len())).collect();
    let batch = exp.train.batch(&idx);
    let truth = exp.model.analytic_gradient(&w, &batch).transpose()?;
    let rows =
        variance_probe(exp.model.as_ref(), &w, cfg.train.epsilon, &batch, q_list, trials, seed, truth.as_deref())?;
    Ok(rows
        .into_iter()
        .map(|r| VarianceLine {
            d: w.len(),
            q: r.q,
            variance: r.variance,
            ci95: r.ci95,
            trials: r.trials,
            analytic: None,
        })
        .collect())
}

pub fn to_tsv(lines: &[VarianceLine]) -> String {
    let mut out = String::from("d\tQ\tvariance\tci95\ttrials\tanalytic\tratio_to_q1\n");
    for l in lines {
        let base = lines.iter().find(|b| b.d == l.d && b.q == 1).map(|b| l.variance / b.variance);
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        let _ = writeln!(
            out,
            "{}\t{}\t{:.6}\t{:.6}\t{}\t{}\t{}",
            l.d,
            l.q,
            l.variance,
            l.ci95,
            l.trials,
            fmt(l.analytic),
            fmt(base)
        );
    }
    out
}
