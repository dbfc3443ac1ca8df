//! The invariant suite behind `ttzo verify`.

use std::time::Instant;

use ndarray::Array2;
use serde::Serialize;
use ttzo::adapters::{AdapterConfig, ParamKind, ParameterRegistry, TensorizedAdapter};
use ttzo::checkpoint::Checkpoint;
use ttzo::metrics::{JsonlSink, MetricsSink};
use ttzo::rng::{check_golden, derive_seed, normals, query_seed, Domain, GaussianStream};
use ttzo::tensor_train::{materialize_parallel, materialize_sequential, TtFactors, TtSpec, REFERENCE_SHAPES};
use ttzo::toy_models::{
    collect_trainable, gradient_oracle, loss_eval, make_synthetic, GradientMode, QuadraticProbe, SyntheticParams,
    TaskKind,
};
use ttzo::zo_engine::{epoch_of_step, query_number, rge_estimate, steps_per_epoch, QuerySchedule, RestoreMode};

use crate::alloc_probe;
use crate::config::RunConfig;
use crate::experiment::{build, run_train, BUILD};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub module: &'static str,
    pub name: &'static str,
    pub invariant: &'static str,
    pub passed: bool,
    /// Non-gating checks are reported but do not affect the exit code.
    pub gating: bool,
    pub detail: String,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub build: &'static str,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| c.gating && !c.passed)
    }
}

type Outcome = Result<String, String>;

struct Suite {
    checks: Vec<Check>,
}

impl Suite {
    fn run(&mut self, module: &'static str, name: &'static str, invariant: &'static str, f: impl FnOnce() -> Outcome) {
        self.push(module, name, invariant, true, f);
    }

    fn advisory(
        &mut self,
        module: &'static str,
        name: &'static str,
        invariant: &'static str,
        f: impl FnOnce() -> Outcome,
    ) {
        self.push(module, name, invariant, false, f);
    }

    fn push(
        &mut self,
        module: &'static str,
        name: &'static str,
        invariant: &'static str,
        gating: bool,
        f: impl FnOnce() -> Outcome,
    ) {
        let start = Instant::now();
        let (passed, detail) = match f() {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        let ms = start.elapsed().as_secs_f64() * 1e3;
        self.checks.push(Check { module, name, invariant, passed, gating, detail, ms });
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_factors(spec: &TtSpec, seed: u64) -> TtFactors {
    TtFactors::from_flat(spec, &normals(seed, spec.param_count())).expect("length matches")
}

fn table_spec(row: usize, rank: usize) -> TtSpec {
    TtSpec::from_modes(&REFERENCE_SHAPES[row].2, rank).expect("reference shapes are valid")
}

/// `sum_{k=1..K} 1/Q_k` against `c * S * sqrt(floor(K/S)) + S` for every
/// `K <= k_max`, with `S = ceil(D/B)` and `alpha = beta = 0.5`.
pub fn sublinear_violation(d: usize, b: usize, k_max: u64, c: f64) -> Option<(u64, f64, f64)> {
    let sched = QuerySchedule::Adaptive { alpha: 0.5, beta: 0.5, q_max: usize::MAX };
    let s = steps_per_epoch(d, b);
    let mut sum = 0.0;
    for k in 1..=k_max {
        sum += 1.0 / query_number(&sched, epoch_of_step(k, d, b)) as f64;
        let bound = c * s as f64 * ((k / s) as f64).sqrt() + s as f64;
        if sum > bound {
            return Some((k, sum, bound));
        }
    }
    None
}

fn tensor_train_checks(suite: &mut Suite) {
    const M: &str = "tensor_train";
    suite.run(M, "parallel_equals_sequential", "grouped contraction matches the sequential chain to 1e-10", || {
        let mut rng = GaussianStream::new(0x7e57);
        let mut cases = 0;
        for row in 0..REFERENCE_SHAPES.len() {
            let spec = table_spec(row, 5);
            let f = random_factors(&spec, row as u64);
            let seq = materialize_sequential(&f, &spec).map_err(|e| e.to_string())?;
            for parts in [2, 3] {
                let diff = max_abs_diff(&seq, &materialize_parallel(&f, &spec, parts).map_err(|e| e.to_string())?);
                ensure(diff <= 1e-10, || format!("reference row {row} parts {parts}: {diff:e}"))?;
            }
            cases += 1;
        }
        while cases < 100 {
            let order = 1 + rng.below(3) as usize;
            let modes: Vec<usize> = (0..2 * order).map(|_| 1 + rng.below(5) as usize).collect();
            let spec = TtSpec::from_modes(&modes, 1 + rng.below(5) as usize).map_err(|e| e.to_string())?;
            let f = random_factors(&spec, rng.next_u64());
            let seq = materialize_sequential(&f, &spec).map_err(|e| e.to_string())?;
            for parts in 2..=spec.num_cores().min(3) {
                let diff = max_abs_diff(&seq, &materialize_parallel(&f, &spec, parts).map_err(|e| e.to_string())?);
                ensure(diff <= 1e-10, || format!("{modes:?} parts {parts}: {diff:e}"))?;
            }
            cases += 1;
        }
        Ok(format!("{cases} cases"))
    });
    suite.run(M, "rank_sum_oracle", "sequential contraction equals the explicit sum over rank tuples", || {
        for (modes, rank) in [(vec![2, 2, 2, 2], 3), (vec![3, 2, 4, 2], 2), (vec![2, 3, 2, 2, 3, 2], 3)] {
            let spec = TtSpec::from_modes(&modes, rank).map_err(|e| e.to_string())?;
            let f = random_factors(&spec, 5);
            let w = materialize_sequential(&f, &spec).map_err(|e| e.to_string())?;
            let diff = max_abs_diff(&w, &brute_force(&f, &spec));
            ensure(diff <= 1e-12, || format!("{modes:?} r={rank}: {diff:e}"))?;
        }
        Ok("3 specs".into())
    });
    suite.run(M, "param_count_below_dense", "param_count < m*n for the reference shapes at rank <= 15", || {
        for row in 0..REFERENCE_SHAPES.len() {
            for rank in 1..=15 {
                let s = table_spec(row, rank);
                ensure(s.param_count() < s.dense_count(), || format!("row {row} rank {rank}"))?;
            }
        }
        Ok(format!("{} rows x 15 ranks", REFERENCE_SHAPES.len()))
    });
    suite.advisory(
        M,
        "param_count_below_dense_rank16",
        "param_count < m*n for the reference shapes at rank 16",
        || {
            let over: Vec<String> = (0..REFERENCE_SHAPES.len())
                .map(|row| table_spec(row, 16))
                .filter(|s| s.param_count() >= s.dense_count())
                .map(|s| format!("{}x{}: {} >= {}", s.in_dim, s.out_dim, s.param_count(), s.dense_count()))
                .collect();
            if over.is_empty() {
                Ok("all below".into())
            } else {
                Err(over.join("; "))
            }
        },
    );
    suite.run(M, "linear_in_each_core", "scaling one core by c scales W by c", || {
        let spec = TtSpec::from_modes(&[4, 4, 4, 4, 4, 4], 5).map_err(|e| e.to_string())?;
        let f = random_factors(&spec, 9);
        let w = materialize_sequential(&f, &spec).map_err(|e| e.to_string())?;
        for t in 0..spec.num_cores() {
            let mut g = f.clone();
            g.cores[t].mapv_inplace(|v| -2.5 * v);
            let diff = max_abs_diff(&(&w * -2.5), &materialize_sequential(&g, &spec).map_err(|e| e.to_string())?);
            ensure(diff <= 1e-10, || format!("core {t}: {diff:e}"))?;
        }
        Ok("6 cores".into())
    });
    suite.run(M, "factor_count", "stored scalars equal sum r_{t-1} k_t r_t", || {
        let s = table_spec(0, 5);
        ensure(s.param_count() == 760 && TtFactors::zeros(&s).param_count() == 760, || "768x64 r=5 != 760".into())?;
        Ok("760 for [8,8,12,4,4,4] r=5".into())
    });
}

fn brute_force(f: &TtFactors, spec: &TtSpec) -> Array2<f64> {
    let modes: Vec<usize> = spec.modes().collect();
    let ranks = spec.ranks();
    let o = spec.order();
    let inner = &ranks[1..ranks.len() - 1];
    let tuples: usize = inner.iter().product();
    Array2::from_shape_fn((spec.in_dim, spec.out_dim), |(i, j)| {
        let mut idx = vec![0; 2 * o];
        let (mut ri, mut rj) = (i, j);
        for t in (0..o).rev() {
            idx[t] = ri % modes[t];
            ri /= modes[t];
            idx[o + t] = rj % modes[o + t];
            rj /= modes[o + t];
        }
        (0..tuples)
            .map(|mut code| {
                let mut alpha = vec![0; ranks.len()];
                for (slot, r) in alpha[1..ranks.len() - 1].iter_mut().zip(inner).rev() {
                    *slot = code % r;
                    code /= r;
                }
                f.cores.iter().enumerate().map(|(t, c)| c[[alpha[t], idx[t], alpha[t + 1]]]).product::<f64>()
            })
            .sum()
    })
}

fn adapter_checks(suite: &mut Suite) {
    const M: &str = "adapters";
    let cfg = AdapterConfig::balanced(32, 8, 2, 2).expect("valid");
    suite.run(M, "zero_up_identity", "a freshly registered residual adapter is the identity", || {
        let mut reg = ParameterRegistry::new();
        let a = TensorizedAdapter::register(&mut reg, "a", &cfg, 3).map_err(|e| e.to_string())?;
        let x = Array2::from_shape_vec((4, 32), normals(1, 128)).expect("shape");
        let y = a.forward(reg.flat(), x.view()).map_err(|e| e.to_string())?;
        let diff = max_abs_diff(&x, &y);
        ensure(diff == 0.0, || format!("deviation {diff:e}"))?;
        Ok("exact".into())
    });
    suite.run(M, "registry_layout", "trainable segments tile w; frozen tensors never enter it", || {
        let exp = build(&RunConfig::default(), 0).map_err(|e| e.to_string())?;
        let reg = collect_trainable(exp.model.as_ref());
        ensure(reg.check_layout(), || "segments overlap or leave gaps".into())?;
        ensure(reg.frozen().all(|e| e.len > 0) && reg.frozen_len() > 0, || "no frozen entries".into())?;
        let total: usize = reg.trainable().map(|e| e.len).sum();
        ensure(total == reg.dim(), || format!("{total} != {}", reg.dim()))?;
        Ok(format!("d = {}, frozen = {}", reg.dim(), reg.frozen_len()))
    });
    suite.run(M, "flat_round_trip", "write_flat(read_flat()) is the identity; wrong lengths are rejected", || {
        let mut reg = ParameterRegistry::new();
        reg.add_frozen("ln", ParamKind::LayerNorm, 4);
        TensorizedAdapter::register(&mut reg, "a", &cfg, 1).map_err(|e| e.to_string())?;
        let w: Vec<f64> = normals(2, reg.dim());
        reg.write_flat(&w).map_err(|e| e.to_string())?;
        ensure(reg.read_flat() == w, || "round trip changed w".into())?;
        ensure(reg.write_flat(&w[1..]).is_err(), || "short write accepted".into())?;
        let mut buf = Vec::new();
        Checkpoint::capture(&reg, 1, 2).write_to(&mut buf).map_err(|e| e.to_string())?;
        let back = Checkpoint::read_from(buf.as_slice()).map_err(|e| e.to_string())?;
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(bits(&back.w) == bits(&w), || "checkpoint not bit-exact".into())?;
        Ok("registry and checkpoint".into())
    });
}

fn model_checks(suite: &mut Suite) {
    const M: &str = "toy_models";
    suite.run(M, "loss_is_pure", "loss evaluation never mutates w or the backbone", || {
        for cfg in [RunConfig::default(), transformer_config()] {
            let exp = build(&cfg, 4).map_err(|e| e.to_string())?;
            let w: Vec<f64> = normals(3, exp.model.dim()).iter().map(|v| 0.1 * v).collect();
            let before = (w.clone(), exp.model.frozen_checksum());
            let batch = exp.train.batch(&(0..8).collect::<Vec<_>>());
            let a = loss_eval(exp.model.as_ref(), &w, &batch).map_err(|e| e.to_string())?;
            let b = loss_eval(exp.model.as_ref(), &w, &batch).map_err(|e| e.to_string())?;
            ensure(a.to_bits() == b.to_bits(), || "loss not repeatable".into())?;
            ensure((w, exp.model.frozen_checksum()) == before, || "evaluation mutated state".into())?;
        }
        Ok("mlp and transformer".into())
    });
    suite.run(M, "quadratic_gradient_exact", "analytic gradient of the quadratic probe is w", || {
        let w = normals(4, 17);
        let probe = QuadraticProbe::new(&w);
        let batch = make_synthetic(TaskKind::QuadraticProbe, 2, 0, &SyntheticParams::default())
            .map_err(|e| e.to_string())?
            .full_batch();
        let g = gradient_oracle(&probe, &w, &batch, GradientMode::Analytic).map_err(|e| e.to_string())?;
        ensure(g == w, || "gradient differs from w".into())?;
        Ok("bit-exact".into())
    });
    suite.run(M, "seeded_generation", "datasets, backbones and adapters are functions of the seed", || {
        for cfg in [RunConfig::default(), transformer_config()] {
            let a = build(&cfg, 11).map_err(|e| e.to_string())?;
            let b = build(&cfg, 11).map_err(|e| e.to_string())?;
            ensure(a.train.checksum() == b.train.checksum(), || "dataset differs".into())?;
            ensure(a.model.frozen_checksum() == b.model.frozen_checksum(), || "backbone differs".into())?;
            ensure(collect_trainable(a.model.as_ref()).flat() == collect_trainable(b.model.as_ref()).flat(), || {
                "adapter init differs".into()
            })?;
        }
        Ok("mlp and transformer".into())
    });
}

fn transformer_config() -> RunConfig {
    RunConfig::parse_str(
        "task.kind = tokens\nmodel.kind = transformer\ntask.samples = 32\ntask.eval_samples = 16\ntrain.batch_size = 8",
    )
    .expect("valid transformer config")
}

fn engine_checks(suite: &mut Suite, golden: &str) {
    const M: &str = "zo_engine";
    suite.run(M, "golden_normals", "the Gaussian perturbation stream matches the pinned table", || {
        check_golden(golden).map(|n| format!("{n} values"))
    });
    suite.run(M, "seed_uniqueness", "no collisions among 10^6 derived query seeds", || {
        let mut seen = std::collections::HashSet::with_capacity(1_000_000);
        for k in 0..1000u64 {
            for q in 0..1000u64 {
                ensure(seen.insert(query_seed(42, k, q)), || format!("collision at k={k} q={q}"))?;
            }
        }
        Ok("10^6 seeds".into())
    });
    suite.run(M, "replay_restoration", "after rge_estimate, |w_exit - w_entry|_inf <= 1e-10 (1 + |w|_inf)", || {
        let batch = quadratic_batch();
        let mut rng = GaussianStream::new(77);
        for trial in 0..50u64 {
            let scale = 10f64.powf(4.0 * rng.next_uniform() - 2.0);
            let w0: Vec<f64> = normals(trial, 1000).iter().map(|v| v * scale).collect();
            let q = 1 + rng.below(20) as usize;
            let seeds: Vec<u64> = (0..q as u64).map(|i| query_seed(trial, 1, i)).collect();
            let mut w = w0.clone();
            rge_estimate(&QuadraticProbe::new(&w0), &mut w, 1e-3, &seeds, &batch, RestoreMode::Replay)
                .map_err(|e| e.to_string())?;
            let sup = w0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let drift = w.iter().zip(&w0).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            ensure(drift <= 1e-10 * (1.0 + sup), || format!("trial {trial}: drift {drift:e}"))?;
        }
        Ok("50 random (w, Q)".into())
    });
    suite.run(M, "schedule_monotone", "Q_k is nondecreasing and within [1, Q_max]", || {
        for (alpha, beta, q_max) in [(0.85, 0.45, 20), (0.5, 0.5, 1000), (0.1, 0.9, 7), (0.99, 0.01, 3)] {
            let s = QuerySchedule::Adaptive { alpha, beta, q_max };
            let mut prev = 0;
            for e in 0..5000 {
                let q = query_number(&s, e);
                ensure(q >= prev && (1..=q_max).contains(&q), || format!("alpha {alpha} beta {beta}: Q({e}) = {q}"))?;
                prev = q;
            }
        }
        Ok("4 schedules x 5000 epochs".into())
    });
    suite.run(M, "epoch_formula", "e_k = floor(k / ceil(D/B))", || {
        ensure(epoch_of_step(125, 1000, 16) == 1 && epoch_of_step(62, 1000, 16) == 0, || "worked example".into())?;
        for (d, b) in [(1000usize, 16usize), (7, 7), (256, 32), (10, 3)] {
            let s = d.div_ceil(b) as u64;
            for k in 1..2000 {
                ensure(epoch_of_step(k, d, b) == k / s, || format!("D={d} B={b} k={k}"))?;
            }
        }
        Ok("4 (D, B) pairs".into())
    });
    suite.run(M, "sublinear_sum", "sum 1/Q_k <= 4 S sqrt(floor(K/S)) + S for alpha = beta = 0.5, K <= 10^5", || {
        for (d, b) in [(1000, 16), (256, 32), (16, 16)] {
            if let Some((k, sum, bound)) = sublinear_violation(d, b, 100_000, 4.0) {
                return Err(format!("D={d} B={b}: K={k} sum {sum:.3} > {bound:.3}"));
            }
        }
        Ok("S in {63, 8, 1}".into())
    });
    suite.advisory(
        M,
        "sublinear_sum_constant_2",
        "sum 1/Q_k <= 2 S sqrt(floor(K/S)) + S for alpha = beta = 0.5, K <= 10^5",
        || {
            let hits: Vec<String> = [(1000, 16), (256, 32), (16, 16)]
                .iter()
                .filter_map(|&(d, b)| {
                    sublinear_violation(d, b, 100_000, 2.0)
                        .map(|(k, s, bd)| format!("D={d} B={b}: K={k} sum {s:.3} > {bd:.3}"))
                })
                .collect();
            if hits.is_empty() {
                Ok("holds".into())
            } else {
                Err(hits.join("; "))
            }
        },
    );
    suite.run(M, "unbiased_at_quadratic", "mean one-query estimate is within 3 standard errors of w", || {
        let batch = quadratic_batch();
        let w = normals(8, 10);
        let probe = QuadraticProbe::new(&w);
        let n = 20_000u64;
        let (mut sum, mut sq) = (vec![0.0; 10], vec![0.0; 10]);
        let mut wv = w.clone();
        for t in 0..n {
            let g = rge_estimate(
                &probe,
                &mut wv,
                1e-3,
                &[derive_seed(5, Domain::Probe, t, 0)],
                &batch,
                RestoreMode::Replay,
            )
            .map_err(|e| e.to_string())?
            .grad;
            for i in 0..10 {
                sum[i] += g[i];
                sq[i] += g[i] * g[i];
            }
        }
        for i in 0..10 {
            let mean = sum[i] / n as f64;
            let se = ((sq[i] / n as f64 - mean * mean) / n as f64).sqrt();
            ensure((mean - w[i]).abs() <= 3.0 * se, || format!("coord {i}: {mean} vs {} (se {se})", w[i]))?;
        }
        Ok(format!("{n} estimates, d = 10"))
    });
    suite.run(M, "estimator_memory", "rge_estimate needs O(d) extra memory regardless of Q", || {
        if !alloc_probe::active() {
            return Err("allocation counting is not installed in this process".into());
        }
        let d = 100_000;
        let w0 = vec![0.25; d];
        let probe = QuadraticProbe::new(&w0);
        let batch = quadratic_batch();
        let mut peaks = Vec::new();
        for q in [1usize, 64] {
            let seeds: Vec<u64> = (0..q as u64).map(|i| query_seed(3, 1, i)).collect();
            let mut w = w0.clone();
            let (est, peak) =
                alloc_probe::peak_during(|| rge_estimate(&probe, &mut w, 1e-3, &seeds, &batch, RestoreMode::Replay));
            est.map_err(|e| e.to_string())?;
            peaks.push(peak);
        }
        ensure(peaks[0] <= 16 * d && peaks[1] <= peaks[0] + 4096, || format!("peaks {peaks:?} bytes"))?;
        Ok(format!("peak bytes Q=1: {}, Q=64: {}", peaks[0], peaks[1]))
    });
    suite.run(M, "deterministic_trace", "the trace is a pure function of (run_seed, config, build)", || {
        let mut cfg = RunConfig::default();
        cfg.task.samples = 64;
        cfg.task.eval_samples = 32;
        cfg.train.batch_size = 16;
        cfg.train.steps = 40;
        let a = run_train(&cfg, 9, None).map_err(|e| e.to_string())?.report;
        let b = run_train(&cfg, 9, None).map_err(|e| e.to_string())?.report;
        ensure(a.records == b.records, || "records differ".into())?;
        Ok("40 steps twice".into())
    });
}

fn quadratic_batch() -> ttzo::toy_models::Batch {
    make_synthetic(TaskKind::QuadraticProbe, 2, 0, &SyntheticParams::default()).expect("valid").full_batch()
}

fn cli_checks(suite: &mut Suite) {
    const M: &str = "bench_cli";
    suite.run(M, "config_defaults", "every documented default parses and validates", || {
        RunConfig::default().validate().map_err(|e| e.to_string())?;
        Ok(format!("{} keys", crate::config::KEYS.len()))
    });
    suite.run(M, "frozen_integrity", "training leaves backbone and layer-norm checksums unchanged", || {
        for cfg in [RunConfig::default(), transformer_config()] {
            let mut cfg = cfg;
            cfg.train.steps = 20;
            let out = run_train(&cfg, 2, None).map_err(|e| e.to_string())?;
            ensure(out.summary.frozen_intact, || format!("{} backbone changed", cfg.task.kind.as_str()))?;
        }
        Ok("mlp and transformer".into())
    });
    suite.run(M, "metrics_lines_parse", "every metrics line is a complete JSON object", || {
        let mut cfg = RunConfig::default();
        cfg.train.steps = 20;
        let out = run_train(&cfg, 1, None).map_err(|e| e.to_string())?;
        let mut sink = JsonlSink::new(Vec::new());
        for r in &out.report.records {
            sink.record(r).map_err(|e| e.to_string())?;
        }
        let bytes = sink.into_inner().map_err(|e| e.to_string())?;
        let text = String::from_utf8(bytes).map_err(|e| e.to_string())?;
        for line in text.lines() {
            serde_json::from_str::<serde_json::Value>(line).map_err(|e| e.to_string())?;
        }
        Ok(format!("{} lines", text.lines().count()))
    });
}

/// Runs every check. `golden` is the Gaussian-stream table to compare against.
pub fn run_all(golden: &str) -> Report {
    let mut suite = Suite { checks: Vec::new() };
    tensor_train_checks(&mut suite);
    adapter_checks(&mut suite);
    model_checks(&mut suite);
    engine_checks(&mut suite, golden);
    cli_checks(&mut suite);
    let passed = suite.checks.iter().all(|c| c.passed || !c.gating);
    Report { build: BUILD, passed, checks: suite.checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_sublinear_constant_fails_and_corrected_holds() {
        assert!(sublinear_violation(1000, 16, 100_000, 2.0).is_some());
        assert_eq!(sublinear_violation(1000, 16, 100_000, 4.0), None);
    }
}
