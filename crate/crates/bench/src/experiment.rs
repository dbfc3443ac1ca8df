//! Builds a model and data from a [`RunConfig`] and runs one training job.

use std::fs::{self, File};
use std::io;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;
use ttzo::metrics::{JsonlSink, MetricsSink, NullSink};
use ttzo::rng::{derive_seed, normals, Domain};
use ttzo::toy_models::{
    collect_trainable, make_synthetic, BackboneConfig, Dataset, MlpModel, ModelError, Objective, QuadraticProbe,
    SyntheticParams, TaskKind, TinyTransformer, TransformerConfig,
};
use ttzo::zo_engine::{train, EngineError, RunStatus, TrainReport};

use crate::config::{ConfigError, RunConfig};

pub const BUILD: &str = concat!("ttzo ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{0}")]
    Io(#[from] io::Error),
}

pub struct Experiment {
    pub model: Box<dyn Objective>,
    pub train: Dataset,
    pub eval: Dataset,
}

/// Data, backbone and adapter initialization all derive from `seed`.
pub fn build(cfg: &RunConfig, seed: u64) -> Result<Experiment, RunError> {
    let t = &cfg.task;
    let params = SyntheticParams {
        classes: t.classes,
        features: t.features,
        separation: t.separation,
        vocab: t.vocab,
        seq_len: t.seq_len,
    };
    let mut train = make_synthetic(t.kind, t.samples + t.eval_samples, seed, &params)?;
    let eval = train.split_off(t.eval_samples);
    let m = &cfg.model;
    let model: Box<dyn Objective> = match t.kind {
        TaskKind::QuadraticProbe => {
            Box::new(QuadraticProbe::new(&normals(derive_seed(seed, Domain::Init, 0, 0), t.dim)))
        }
        TaskKind::BlobsClassification => {
            let backbone = BackboneConfig {
                input_dim: t.features,
                hidden: m.hidden,
                classes: t.classes,
                head_scale: m.head_scale,
                seed,
            };
            Box::new(MlpModel::new(&backbone, Some(&cfg.adapter()?))?)
        }
        TaskKind::TokenPatternClassification => {
            let tc = TransformerConfig {
                layers: m.layers,
                width: m.hidden,
                heads: m.heads,
                seq_len: t.seq_len,
                vocab: t.vocab,
                ff_width: m.ff_width,
                classes: t.classes,
                head_scale: m.head_scale,
                seed,
            };
            Box::new(TinyTransformer::new(&tc, Some(&cfg.adapter()?))?)
        }
    };
    Ok(Experiment { model, train, eval })
}

/// Final record of a run, written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub run_seed: u64,
    pub status: RunStatus,
    pub diverged: bool,
    pub steps_run: u64,
    pub total_queries: u64,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub best_eval_loss: Option<f64>,
    pub final_eval_loss: Option<f64>,
    pub threshold: f64,
    pub steps_to_threshold: Option<u64>,
    pub wall_ms_to_threshold: Option<f64>,
    pub frozen_checksum: String,
    pub frozen_intact: bool,
    pub wall_ms: f64,
}

impl Summary {
    fn new(cfg: &RunConfig, seed: u64, report: &TrainReport, before: &str, after: String, wall_ms: f64) -> Self {
        let threshold = cfg.task.threshold;
        Summary {
            run_seed: seed,
            status: report.status.clone(),
            diverged: report.diverged(),
            steps_run: report.records.len() as u64,
            total_queries: report.total_queries,
            initial_loss: report.initial_loss,
            final_loss: report.records.last().map(|r| r.loss),
            best_eval_loss: report.best_eval(),
            final_eval_loss: report.records.iter().rev().find_map(|r| r.eval_loss),
            threshold,
            steps_to_threshold: report.steps_to_threshold(threshold),
            wall_ms_to_threshold: report.elapsed_to_threshold(threshold),
            frozen_intact: before == after,
            frozen_checksum: after,
            wall_ms,
        }
    }
}

#[derive(Serialize)]
struct Header<'a> {
    header: HeaderBody<'a>,
}

#[derive(Serialize)]
struct HeaderBody<'a> {
    build: &'a str,
    run_seed: u64,
    config: &'a RunConfig,
}

pub struct RunOutcome {
    pub report: TrainReport,
    pub summary: Summary,
}

/// Runs one training job. With `out`, writes `metrics.jsonl` (one header
/// line, then one line per step) and `summary.json` into that directory.
pub fn run_train(cfg: &RunConfig, seed: u64, out: Option<&Path>) -> Result<RunOutcome, RunError> {
    let tc = cfg.train_config(seed)?;
    let exp = build(cfg, seed)?;
    let mut reg = collect_trainable(exp.model.as_ref());
    let before = exp.model.frozen_checksum();
    let start = Instant::now();
    let (report, summary) = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut sink = JsonlSink::new(File::create(dir.join("metrics.jsonl"))?);
            let mut resolved = cfg.clone();
            resolved.train.seed = seed;
            sink.write_line(&Header { header: HeaderBody { build: BUILD, run_seed: seed, config: &resolved } })?;
            let report = train(exp.model.as_ref(), &mut reg, &exp.train, Some(&exp.eval), &tc, &mut sink)?;
            sink.flush_epoch()?;
            let wall = start.elapsed().as_secs_f64() * 1e3;
            let summary = Summary::new(cfg, seed, &report, &before, exp.model.frozen_checksum(), wall);
            let mut text = serde_json::to_string_pretty(&summary).map_err(io::Error::from)?;
            text.push('\n');
            fs::write(dir.join("summary.json"), text)?;
            (report, summary)
        }
        None => {
            let report = train(exp.model.as_ref(), &mut reg, &exp.train, Some(&exp.eval), &tc, &mut NullSink)?;
            let wall = start.elapsed().as_secs_f64() * 1e3;
            let summary = Summary::new(cfg, seed, &report, &before, exp.model.frozen_checksum(), wall);
            (report, summary)
        }
    };
    Ok(RunOutcome { report, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::parse_str("task.samples = 64\ntask.eval_samples = 32\ntrain.steps = 30").unwrap();
        cfg.train.batch_size = 16;
        cfg
    }

    #[test]
    fn builds_every_task() {
        let mut cfg = small();
        let exp = build(&cfg, 1).unwrap();
        assert_eq!((exp.train.len(), exp.eval.len()), (64, 32));
        cfg.task.kind = TaskKind::QuadraticProbe;
        assert_eq!(build(&cfg, 1).unwrap().model.dim(), 100);
        let cfg = RunConfig::parse_str("task.kind = tokens\nmodel.kind = transformer\ntrain.steps = 5").unwrap();
        let exp = build(&cfg, 1).unwrap();
        assert!(exp.model.dim() > 0);
    }

    #[test]
    fn in_memory_run_summarizes() {
        let out = run_train(&small(), 3, None).unwrap();
        assert_eq!(out.summary.steps_run, 30);
        assert!(out.summary.frozen_intact);
        assert!(!out.summary.diverged);
        assert_eq!(out.report.records.len(), 30);
    }
}
