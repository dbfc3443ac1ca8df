//! Zeroth-order optimizer with seed-replayed perturbations and an adaptive
//! query schedule.
//!
//! One step at global step `k`:
//!
//! 1. `e_k = floor(k / ceil(D / B))`; when the epoch changes, recompute
//!    `Q_k = clamp(ceil(alpha * e_k^beta), 1, Q_max)`.
//! 2. For each query `q`, with `s_q = mix64(run_seed, k, q)`:
//!    `w += eps z`, evaluate `l+`; `w -= 2 eps z`, evaluate `l-`;
//!    `w += eps z`. The normals `z` are regenerated from `s_q` each time and
//!    never stored.
//! 3. `g = (1/Q) sum_q (l+ - l-) / (2 eps) * z_q`, accumulated by one more
//!    replay of each seed.
//! 4. `w -= eta g`.
//!
//! Auxiliary memory is the `d`-length accumulator plus the generator state,
//! independent of `Q`.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::ParameterRegistry;
use crate::metrics::{MetricsSink, StepRecord};
use crate::rng::{derive_seed, query_seed, Domain, GaussianStream};
use crate::toy_models::{Batch, Dataset, ModelError, Objective};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model has no trainable parameters")]
    NoTrainableParameters,
    #[error("metrics sink: {0}")]
    Sink(#[from] std::io::Error),
}

/// Perturbation scale and learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RgeConfig {
    pub epsilon: f64,
    pub eta: f64,
}

impl RgeConfig {
    pub fn new(epsilon: f64, eta: f64) -> Result<Self, EngineError> {
        let cfg = Self { epsilon, eta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(EngineError::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(EngineError::InvalidConfig(format!("eta must be > 0, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Number of queries per step, fixed within an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum QuerySchedule {
    Adaptive { alpha: f64, beta: f64, q_max: usize },
    Fixed { q: usize },
}

impl QuerySchedule {
    /// `alpha = 0.85`, `beta = 0.45`, `Q_max = 20`.
    pub const DEFAULT_ADAPTIVE: QuerySchedule = QuerySchedule::Adaptive { alpha: 0.85, beta: 0.45, q_max: 20 };

    pub fn validate(&self) -> Result<(), EngineError> {
        match *self {
            QuerySchedule::Adaptive { alpha, beta, q_max } => {
                if !(alpha > 0.0 && alpha < 1.0) || !(beta > 0.0 && beta < 1.0) || q_max < 1 {
                    return Err(EngineError::InvalidConfig(format!(
                        "adaptive schedule needs 0<alpha<1, 0<beta<1, q_max>=1 (got {alpha}, {beta}, {q_max})"
                    )));
                }
            }
            QuerySchedule::Fixed { q } => {
                if q < 1 {
                    return Err(EngineError::InvalidConfig("fixed query count must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Largest query count the schedule can produce.
    pub fn max_queries(&self) -> usize {
        match *self {
            QuerySchedule::Adaptive { q_max, .. } => q_max,
            QuerySchedule::Fixed { q } => q,
        }
    }
}

/// `clamp(ceil(alpha * epoch^beta), 1, Q_max)`, or the fixed count.
pub fn query_number(sched: &QuerySchedule, epoch: u64) -> usize {
    match *sched {
        QuerySchedule::Adaptive { alpha, beta, q_max } => {
            let raw = alpha * (epoch as f64).powf(beta);
            let q = raw.ceil();
            if q < 1.0 {
                1
            } else if q >= q_max as f64 {
                q_max
            } else {
                q as usize
            }
        }
        QuerySchedule::Fixed { q } => q,
    }
}

/// Steps per epoch, `ceil(D / B)`.
pub fn steps_per_epoch(dataset_size: usize, batch_size: usize) -> u64 {
    dataset_size.div_ceil(batch_size) as u64
}

/// `floor(k / ceil(D / B))`.
pub fn epoch_of_step(step: u64, dataset_size: usize, batch_size: usize) -> u64 {
    step / steps_per_epoch(dataset_size, batch_size)
}

/// `w += coeff * z` with `z` streamed from `seed`.
pub fn perturb_in_place(w: &mut [f64], seed: u64, coeff: f64) {
    if coeff == 0.0 {
        return;
    }
    let mut z = GaussianStream::new(seed);
    for v in w.iter_mut() {
        *v += coeff * z.next_normal();
    }
}

/// How `w` is brought back after the two perturbed evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RestoreMode {
    /// `+eps`, `-2 eps`, `+eps` in place, regenerating `z` from its seed.
    #[default]
    Replay,
    /// Copies `w` before each query and restores the copy. Debug only: it
    /// costs an extra `d`-length buffer.
    Snapshot,
}

/// Result of one gradient estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub grad: Vec<f64>,
    /// Mean of `(l+ + l-) / 2` over queries, an `O(eps^2)` proxy for `l(w)`.
    pub loss: f64,
    /// Per-query projected differences `(l+ - l-) / (2 eps)`.
    pub coefficients: Vec<f64>,
}

fn accumulate(d: usize, seeds: &[u64], coefficients: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; d];
    for (&seed, &c) in seeds.iter().zip(coefficients) {
        let mut z = GaussianStream::new(seed);
        for g in grad.iter_mut() {
            *g += c * z.next_normal();
        }
    }
    let inv_q = 1.0 / seeds.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv_q);
    grad
}

/// Multi-query randomized gradient estimate with in-place perturbation.
///
/// `w` leaves this function equal to its entry value up to floating-point
/// replay drift, including when a loss evaluation fails.
pub fn rge_estimate(
    model: &dyn Objective,
    w: &mut [f64],
    epsilon: f64,
    seeds: &[u64],
    batch: &Batch,
    restore: RestoreMode,
) -> Result<Estimate, EngineError> {
    if seeds.is_empty() {
        return Err(EngineError::InvalidConfig("at least one query required".into()));
    }
    let mut coefficients = Vec::with_capacity(seeds.len());
    let mut loss_sum = 0.0;
    let mut snapshot = match restore {
        RestoreMode::Snapshot => Some(Vec::with_capacity(w.len())),
        RestoreMode::Replay => None,
    };
    for &seed in seeds {
        if let Some(s) = snapshot.as_mut() {
            s.clear();
            s.extend_from_slice(w);
        }
        perturb_in_place(w, seed, epsilon);
        let plus = model.loss(w, batch);
        let minus = match plus {
            Ok(_) => {
                perturb_in_place(w, seed, -2.0 * epsilon);
                let m = model.loss(w, batch);
                match &snapshot {
                    Some(s) => w.copy_from_slice(s),
                    None => perturb_in_place(w, seed, epsilon),
                }
                m
            }
            Err(e) => {
                match &snapshot {
                    Some(s) => w.copy_from_slice(s),
                    None => perturb_in_place(w, seed, -epsilon),
                }
                return Err(e.into());
            }
        };
        let (plus, minus) = (plus?, minus?);
        coefficients.push((plus - minus) / (2.0 * epsilon));
        loss_sum += 0.5 * (plus + minus);
    }
    let grad = accumulate(w.len(), seeds, &coefficients);
    Ok(Estimate { grad, loss: loss_sum / seeds.len() as f64, coefficients })
}

/// Same estimate with queries evaluated concurrently on private copies of
/// `w`. Matches [`rge_estimate`] up to summation-order rounding.
pub fn rge_estimate_parallel(
    model: &dyn Objective,
    w: &[f64],
    epsilon: f64,
    seeds: &[u64],
    batch: &Batch,
) -> Result<Estimate, EngineError> {
    if seeds.is_empty() {
        return Err(EngineError::InvalidConfig("at least one query required".into()));
    }
    let pairs: Vec<(f64, f64)> = seeds
        .par_iter()
        .map(|&seed| -> Result<(f64, f64), EngineError> {
            let mut local = w.to_vec();
            perturb_in_place(&mut local, seed, epsilon);
            let plus = model.loss(&local, batch)?;
            perturb_in_place(&mut local, seed, -2.0 * epsilon);
            let minus = model.loss(&local, batch)?;
            Ok(((plus - minus) / (2.0 * epsilon), 0.5 * (plus + minus)))
        })
        .collect::<Result<_, _>>()?;
    let coefficients: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let loss = pairs.iter().map(|p| p.1).sum::<f64>() / seeds.len() as f64;
    let grad = accumulate(w.len(), seeds, &coefficients);
    Ok(Estimate { grad, loss, coefficients })
}

/// `w -= eta * grad`.
pub fn sgd_update(w: &mut [f64], grad: &[f64], eta: f64) -> Result<(), EngineError> {
    if w.len() != grad.len() {
        return Err(EngineError::LengthMismatch { expected: w.len(), got: grad.len() });
    }
    for (v, g) in w.iter_mut().zip(grad) {
        *v -= eta * g;
    }
    Ok(())
}

/// Epoch-wise shuffled batches without replacement.
///
/// Step `k` draws batch `k mod ceil(D/B)` of the permutation for epoch `e_k`,
/// so batch boundaries line up with the epochs that drive the schedule.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    run_seed: u64,
    size: usize,
    batch: usize,
    epoch: Option<u64>,
    perm: Vec<usize>,
}

impl EpochSampler {
    pub fn new(run_seed: u64, size: usize, batch: usize) -> Self {
        Self { run_seed, size, batch, epoch: None, perm: Vec::new() }
    }

    pub fn indices(&mut self, step: u64) -> &[usize] {
        let per_epoch = steps_per_epoch(self.size, self.batch);
        let epoch = step / per_epoch;
        if self.epoch != Some(epoch) {
            self.perm = (0..self.size).collect();
            GaussianStream::new(derive_seed(self.run_seed, Domain::Shuffle, epoch, 0)).shuffle(&mut self.perm);
            self.epoch = Some(epoch);
        }
        let j = (step % per_epoch) as usize;
        let start = j * self.batch;
        &self.perm[start..(start + self.batch).min(self.size)]
    }
}

/// Everything `train` needs besides the model and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rge: RgeConfig,
    pub schedule: QuerySchedule,
    pub batch_size: usize,
    pub steps: u64,
    /// Evaluate on the eval set every this many steps (0 disables).
    pub eval_every: u64,
    pub run_seed: u64,
    pub restore: RestoreMode,
    pub parallel_queries: bool,
    /// Divergence: loss above `divergence_factor x initial` for
    /// `divergence_patience` consecutive steps.
    pub divergence_factor: f64,
    pub divergence_patience: u64,
    pub record_timing: bool,
}

impl TrainConfig {
    pub fn new(rge: RgeConfig, schedule: QuerySchedule, batch_size: usize, steps: u64, run_seed: u64) -> Self {
        Self {
            rge,
            schedule,
            batch_size,
            steps,
            eval_every: 0,
            run_seed,
            restore: RestoreMode::Replay,
            parallel_queries: false,
            divergence_factor: 1e3,
            divergence_patience: 50,
            record_timing: false,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        self.rge.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(EngineError::InvalidConfig("batch size must be >= 1".into()));
        }
        if self.divergence_factor.is_nan() || self.divergence_factor <= 1.0 || self.divergence_patience == 0 {
            return Err(EngineError::InvalidConfig("divergence rule needs factor > 1 and patience >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DivergenceReason {
    NonFiniteLoss { step: u64 },
    LossBlowUp { step: u64, factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged(DivergenceReason),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub status: RunStatus,
    pub records: Vec<StepRecord>,
    pub initial_loss: Option<f64>,
    pub total_queries: u64,
}

impl TrainReport {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged(_))
    }

    pub fn best_eval(&self) -> Option<f64> {
        self.records.iter().filter_map(|r| r.eval_loss).reduce(f64::min)
    }

    /// First step whose eval loss is at or below `threshold`.
    pub fn steps_to_threshold(&self, threshold: f64) -> Option<u64> {
        self.records.iter().find(|r| r.eval_loss.is_some_and(|l| l <= threshold)).map(|r| r.k)
    }

    pub fn elapsed_to_threshold(&self, threshold: f64) -> Option<f64> {
        self.records.iter().find(|r| r.eval_loss.is_some_and(|l| l <= threshold)).and_then(|r| r.elapsed_ms)
    }
}

/// Runs `cfg.steps` optimizer steps on the registry's `w`.
///
/// A diverging run is not an error: it halts and reports
/// [`RunStatus::Diverged`] with every record up to the halt.
pub fn train(
    model: &dyn Objective,
    reg: &mut ParameterRegistry,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TrainReport, EngineError> {
    cfg.validate()?;
    if reg.dim() == 0 {
        return Err(EngineError::NoTrainableParameters);
    }
    if reg.dim() != model.dim() {
        return Err(EngineError::LengthMismatch { expected: model.dim(), got: reg.dim() });
    }
    if data.is_empty() {
        return Err(EngineError::InvalidConfig("empty dataset".into()));
    }
    let size = data.len();
    let mut sampler = EpochSampler::new(cfg.run_seed, size, cfg.batch_size);
    let eval_batch = eval.map(Dataset::full_batch);
    let start = Instant::now();
    let mut report =
        TrainReport { status: RunStatus::Completed, records: Vec::new(), initial_loss: None, total_queries: 0 };
    let mut current_epoch = None;
    let mut queries = 1;
    let mut blow_up_run = 0u64;
    let mut seeds = Vec::with_capacity(cfg.schedule.max_queries());

    for k in 1..=cfg.steps {
        let epoch = epoch_of_step(k, size, cfg.batch_size);
        if current_epoch != Some(epoch) {
            if current_epoch.is_some() {
                sink.flush_epoch()?;
            }
            queries = query_number(&cfg.schedule, epoch);
            current_epoch = Some(epoch);
        }
        let batch = data.batch(sampler.indices(k));
        seeds.clear();
        seeds.extend((1..=queries as u64).map(|q| query_seed(cfg.run_seed, k, q)));

        let estimate = if cfg.parallel_queries {
            rge_estimate_parallel(model, reg.flat(), cfg.rge.epsilon, &seeds, &batch)
        } else {
            rge_estimate(model, reg.flat_mut(), cfg.rge.epsilon, &seeds, &batch, cfg.restore)
        };
        let estimate = match estimate {
            Ok(e) => e,
            Err(EngineError::Model(ModelError::NonFiniteLoss(_))) => {
                report.status = RunStatus::Diverged(DivergenceReason::NonFiniteLoss { step: k });
                break;
            }
            Err(e) => return Err(e),
        };
        report.total_queries += queries as u64;
        sgd_update(reg.flat_mut(), &estimate.grad, cfg.rge.eta)?;

        let eval_loss = match (&eval_batch, cfg.eval_every) {
            (Some(b), every) if every > 0 && k % every == 0 => match model.loss(reg.flat(), b) {
                Ok(l) => Some(l),
                Err(ModelError::NonFiniteLoss(_)) => {
                    report.status = RunStatus::Diverged(DivergenceReason::NonFiniteLoss { step: k });
                    None
                }
                Err(e) => return Err(e.into()),
            },
            _ => None,
        };
        let record = StepRecord {
            k,
            epoch,
            q: queries,
            loss: estimate.loss,
            eval_loss,
            elapsed_ms: cfg.record_timing.then(|| start.elapsed().as_secs_f64() * 1e3),
        };
        sink.record(&record)?;
        report.records.push(record);
        if report.diverged() {
            break;
        }

        let initial = *report.initial_loss.get_or_insert(estimate.loss);
        if estimate.loss > cfg.divergence_factor * initial.max(f64::MIN_POSITIVE) {
            blow_up_run += 1;
            if blow_up_run >= cfg.divergence_patience {
                report.status =
                    RunStatus::Diverged(DivergenceReason::LossBlowUp { step: k, factor: estimate.loss / initial });
                break;
            }
        } else {
            blow_up_run = 0;
        }
    }
    sink.flush_epoch()?;
    Ok(report)
}

/// One row of [`variance_probe`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub q: usize,
    /// Mean of `||g_Q - g_ref||^2` over trials.
    pub variance: f64,
    /// Half-width of the 95% normal confidence interval of that mean.
    pub ci95: f64,
    pub trials: usize,
}

pub const MIN_VARIANCE_TRIALS: usize = 1000;

fn probe_estimate(
    model: &dyn Objective,
    w: &[f64],
    epsilon: f64,
    batch: &Batch,
    seed: u64,
    q: usize,
    trial: usize,
) -> Result<Vec<f64>, EngineError> {
    let seeds: Vec<u64> =
        (0..q as u64).map(|i| derive_seed(seed, Domain::Probe, ((q as u64) << 32) | trial as u64, i)).collect();
    let mut local = w.to_vec();
    Ok(rge_estimate(model, &mut local, epsilon, &seeds, batch, RestoreMode::Replay)?.grad)
}

/// Empirical `E ||g_Q - g_ref||^2` for each `Q`.
///
/// `g_ref` is `truth` when given, else the mean estimate over all trials of
/// that `Q` (computed in a first pass; the second pass replays the same seeds).
#[allow(clippy::too_many_arguments)]
pub fn variance_probe(
    model: &dyn Objective,
    w: &[f64],
    epsilon: f64,
    batch: &Batch,
    q_list: &[usize],
    trials: usize,
    seed: u64,
    truth: Option<&[f64]>,
) -> Result<Vec<VarianceRow>, EngineError> {
    if trials < MIN_VARIANCE_TRIALS {
        return Err(EngineError::InvalidConfig(format!(
            "variance probe needs at least {MIN_VARIANCE_TRIALS} trials, got {trials}"
        )));
    }
    if q_list.contains(&0) {
        return Err(EngineError::InvalidConfig("query counts must be >= 1".into()));
    }
    let d = w.len();
    q_list
        .iter()
        .map(|&q| {
            let reference = match truth {
                Some(t) => t.to_vec(),
                None => {
                    let sums = (0..trials)
                        .into_par_iter()
                        .map(|t| probe_estimate(model, w, epsilon, batch, seed, q, t))
                        .collect::<Result<Vec<_>, _>>()?;
                    let mut mean = vec![0.0; d];
                    for g in &sums {
                        mean.iter_mut().zip(g).for_each(|(m, v)| *m += v);
                    }
                    mean.iter_mut().for_each(|m| *m /= trials as f64);
                    mean
                }
            };
            let errs = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let g = probe_estimate(model, w, epsilon, batch, seed, q, t)?;
                    Ok(g.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                })
                .collect::<Result<Vec<f64>, EngineError>>()?;
            let n = errs.len() as f64;
            let mean = errs.iter().sum::<f64>() / n;
            let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
            Ok(VarianceRow { q, variance: mean, ci95: 1.96 * (var / n).sqrt(), trials })
        })
        .collect()
}
