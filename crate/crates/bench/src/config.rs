//! Flat `section.key = value` run configuration.
//!
//! Every key, its default and its meaning live in [`KEYS`]; the defaults are
//! applied through the same parser as a config file, and `--help` prints the
//! table.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;
use ttzo::adapters::{Activation, AdapterConfig};
use ttzo::tensor_train::TtSpec;
use ttzo::toy_models::TaskKind;
use ttzo::zo_engine::{QuerySchedule, RestoreMode, RgeConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given twice")]
    Duplicate(String),
    #[error("`{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("task.kind", "blobs", "blobs | tokens | quadratic"),
    ("task.samples", "256", "training set size D"),
    ("task.eval_samples", "256", "held-out eval set size (same distribution)"),
    ("task.classes", "2", "number of classes"),
    ("task.features", "8", "blobs: input features"),
    ("task.separation", "4.0", "blobs: center distance from origin, in within-class std"),
    ("task.vocab", "32", "tokens: vocabulary size"),
    ("task.seq_len", "16", "tokens: sequence length"),
    ("task.dim", "100", "quadratic: parameter count d"),
    ("task.threshold", "0.3", "eval loss that counts as reached for steps-to-threshold"),
    ("model.kind", "mlp", "mlp (blobs) | transformer (tokens); ignored for quadratic"),
    ("model.hidden", "32", "hidden width (mlp) or model width (transformer)"),
    ("model.head_scale", "0.5", "std multiplier of the frozen output head"),
    ("model.layers", "2", "transformer: encoder layers"),
    ("model.heads", "2", "transformer: attention heads"),
    ("model.ff_width", "64", "transformer: feed-forward width"),
    ("adapter.down", "4,8,2,4", "down-projection TT modes (input modes then output modes); empty = balanced"),
    ("adapter.up", "2,4,4,8", "up-projection TT modes; empty = balanced"),
    ("adapter.bottleneck", "8", "bottleneck width when the modes are empty"),
    ("adapter.order", "2", "modes per side when the modes are empty"),
    ("adapter.rank", "2", "TT rank"),
    ("adapter.activation", "relu", "relu | tanh | gelu"),
    ("adapter.residual", "true", "add the adapter input to its output"),
    ("adapter.bias", "true", "trainable biases on both projections"),
    ("schedule.mode", "adaptive", "adaptive | fixed"),
    ("schedule.alpha", "0.85", "adaptive: Q = clamp(ceil(alpha * epoch^beta), 1, q_max)"),
    ("schedule.beta", "0.45", "adaptive: exponent"),
    ("schedule.q_max", "20", "adaptive: query cap"),
    ("schedule.q", "1", "fixed: queries per step"),
    ("rge.epsilon", "0.001", "perturbation scale"),
    ("rge.eta", "0.1", "learning rate"),
    ("train.batch_size", "32", "batch size B"),
    ("train.steps", "1000", "optimizer steps K"),
    ("train.eval_every", "10", "eval-loss period in steps (0 = never)"),
    ("train.seed", "0", "run seed; --seed overrides"),
    ("train.restore", "replay", "replay | snapshot"),
    ("train.parallel_queries", "false", "evaluate queries concurrently on weight copies"),
    ("train.record_timing", "false", "add elapsed_ms to step records (breaks byte-identical reruns)"),
    ("train.divergence_factor", "1000", "halt when loss exceeds this multiple of the initial loss ..."),
    ("train.divergence_patience", "50", "... for this many consecutive steps"),
    ("output.dir", "runs/latest", "run directory; --out overrides"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub samples: usize,
    pub eval_samples: usize,
    pub classes: usize,
    pub features: usize,
    pub separation: f64,
    pub vocab: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub hidden: usize,
    pub head_scale: f64,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdapterSection {
    pub down: Vec<usize>,
    pub up: Vec<usize>,
    pub bottleneck: usize,
    pub order: usize,
    pub rank: usize,
    pub activation: Activation,
    pub residual: bool,
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleSection {
    pub mode: String,
    pub alpha: f64,
    pub beta: f64,
    pub q_max: usize,
    pub q: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSection {
    pub epsilon: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub restore: RestoreMode,
    pub parallel_queries: bool,
    pub record_timing: bool,
    pub divergence_factor: f64,
    pub divergence_patience: u64,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub task: TaskSection,
    pub model: ModelSection,
    pub adapter: AdapterSection,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub output_dir: String,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into() })
}

fn parse_modes(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            task: TaskSection {
                kind: TaskKind::BlobsClassification,
                samples: 0,
                eval_samples: 0,
                classes: 0,
                features: 0,
                separation: 0.0,
                vocab: 0,
                seq_len: 0,
                dim: 0,
                threshold: 0.0,
            },
            model: ModelSection { kind: ModelKind::Mlp, hidden: 0, head_scale: 0.0, layers: 0, heads: 0, ff_width: 0 },
            adapter: AdapterSection {
                down: Vec::new(),
                up: Vec::new(),
                bottleneck: 0,
                order: 0,
                rank: 0,
                activation: Activation::Relu,
                residual: false,
                bias: false,
            },
            schedule: ScheduleSection { mode: String::new(), alpha: 0.0, beta: 0.0, q_max: 0, q: 0 },
            train: TrainSection {
                epsilon: 0.0,
                eta: 0.0,
                batch_size: 0,
                steps: 0,
                eval_every: 0,
                seed: 0,
                restore: RestoreMode::Replay,
                parallel_queries: false,
                record_timing: false,
                divergence_factor: 0.0,
                divergence_patience: 0,
            },
            output_dir: String::new(),
        };
        for (key, value, _) in KEYS {
            cfg.set(key, value).expect("built-in defaults parse");
        }
        cfg
    }
}

impl RunConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "task.kind" => {
                self.task.kind =
                    TaskKind::parse(v).ok_or_else(|| ConfigError::BadValue { key: key.into(), value: v.into() })?
            }
            "task.samples" => self.task.samples = parse(key, v)?,
            "task.eval_samples" => self.task.eval_samples = parse(key, v)?,
            "task.classes" => self.task.classes = parse(key, v)?,
            "task.features" => self.task.features = parse(key, v)?,
            "task.separation" => self.task.separation = parse(key, v)?,
            "task.vocab" => self.task.vocab = parse(key, v)?,
            "task.seq_len" => self.task.seq_len = parse(key, v)?,
            "task.dim" => self.task.dim = parse(key, v)?,
            "task.threshold" => self.task.threshold = parse(key, v)?,
            "model.kind" => {
                self.model.kind = match v {
                    "mlp" => ModelKind::Mlp,
                    "transformer" => ModelKind::Transformer,
                    _ => return Err(ConfigError::BadValue { key: key.into(), value: v.into() }),
                }
            }
            "model.hidden" => self.model.hidden = parse(key, v)?,
            "model.head_scale" => self.model.head_scale = parse(key, v)?,
            "model.layers" => self.model.layers = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.ff_width" => self.model.ff_width = parse(key, v)?,
            "adapter.down" => self.adapter.down = parse_modes(key, v)?,
            "adapter.up" => self.adapter.up = parse_modes(key, v)?,
            "adapter.bottleneck" => self.adapter.bottleneck = parse(key, v)?,
            "adapter.order" => self.adapter.order = parse(key, v)?,
            "adapter.rank" => self.adapter.rank = parse(key, v)?,
            "adapter.activation" => {
                self.adapter.activation =
                    Activation::parse(v).ok_or_else(|| ConfigError::BadValue { key: key.into(), value: v.into() })?
            }
            "adapter.residual" => self.adapter.residual = parse(key, v)?,
            "adapter.bias" => self.adapter.bias = parse(key, v)?,
            "schedule.mode" => match v {
                "adaptive" | "fixed" => self.schedule.mode = v.into(),
                _ => return Err(ConfigError::BadValue { key: key.into(), value: v.into() }),
            },
            "schedule.alpha" => self.schedule.alpha = parse(key, v)?,
            "schedule.beta" => self.schedule.beta = parse(key, v)?,
            "schedule.q_max" => self.schedule.q_max = parse(key, v)?,
            "schedule.q" => self.schedule.q = parse(key, v)?,
            "rge.epsilon" => self.train.epsilon = parse(key, v)?,
            "rge.eta" => self.train.eta = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.restore" => {
                self.train.restore = match v {
                    "replay" => RestoreMode::Replay,
                    "snapshot" => RestoreMode::Snapshot,
                    _ => return Err(ConfigError::BadValue { key: key.into(), value: v.into() }),
                }
            }
            "train.parallel_queries" => self.train.parallel_queries = parse(key, v)?,
            "train.record_timing" => self.train.record_timing = parse(key, v)?,
            "train.divergence_factor" => self.train.divergence_factor = parse(key, v)?,
            "train.divergence_patience" => self.train.divergence_patience = parse(key, v)?,
            "output.dir" => self.output_dir = v.into(),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Parses config text over the defaults and validates the result.
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: i + 1, msg: format!("expected `key = value`, got `{line}`") });
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate(key.into()));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::parse_str(&text)
    }

    pub fn schedule(&self) -> QuerySchedule {
        let s = &self.schedule;
        match s.mode.as_str() {
            "fixed" => QuerySchedule::Fixed { q: s.q },
            _ => QuerySchedule::Adaptive { alpha: s.alpha, beta: s.beta, q_max: s.q_max },
        }
    }

    /// Adapter shapes from explicit modes, or balanced from `(hidden,
    /// bottleneck, order, rank)` when either mode list is empty.
    pub fn adapter(&self) -> Result<AdapterConfig, ConfigError> {
        let a = &self.adapter;
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(format!("adapter: {e}"));
        let mut cfg = if a.down.is_empty() || a.up.is_empty() {
            AdapterConfig::balanced(self.model.hidden, a.bottleneck, a.order, a.rank).map_err(|e| invalid(&e))?
        } else {
            AdapterConfig {
                down: TtSpec::from_modes(&a.down, a.rank).map_err(|e| invalid(&e))?,
                up: TtSpec::from_modes(&a.up, a.rank).map_err(|e| invalid(&e))?,
                activation: a.activation,
                residual: a.residual,
                bias: a.bias,
            }
        };
        cfg.activation = a.activation;
        cfg.residual = a.residual;
        cfg.bias = a.bias;
        cfg.validate().map_err(|e| invalid(&e))?;
        if cfg.down.in_dim != self.model.hidden {
            return Err(ConfigError::Invalid(format!(
                "adapter input width {} does not match model.hidden {}",
                cfg.down.in_dim, self.model.hidden
            )));
        }
        Ok(cfg)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, ConfigError> {
        let t = &self.train;
        let rge = RgeConfig::new(t.epsilon, t.eta).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut cfg = TrainConfig::new(rge, self.schedule(), t.batch_size, t.steps, seed);
        cfg.eval_every = t.eval_every;
        cfg.restore = t.restore;
        cfg.parallel_queries = t.parallel_queries;
        cfg.record_timing = t.record_timing;
        cfg.divergence_factor = t.divergence_factor;
        cfg.divergence_patience = t.divergence_patience;
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.task;
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if t.samples < 2 || t.eval_samples < 1 {
            return invalid("need task.samples >= 2 and task.eval_samples >= 1".into());
        }
        if self.train.batch_size > t.samples {
            return invalid(format!("train.batch_size {} exceeds task.samples {}", self.train.batch_size, t.samples));
        }
        match (t.kind, self.model.kind) {
            (TaskKind::QuadraticProbe, _) => {
                if t.dim == 0 {
                    return invalid("task.dim must be >= 1".into());
                }
            }
            (TaskKind::BlobsClassification, ModelKind::Mlp) => {
                self.adapter()?;
            }
            (TaskKind::TokenPatternClassification, ModelKind::Transformer) => {
                self.adapter()?;
                if self.model.heads == 0 || !self.model.hidden.is_multiple_of(self.model.heads) {
                    return invalid("model.hidden must be a multiple of model.heads".into());
                }
            }
            (task, model) => {
                return invalid(format!("task {} needs the other model kind, not {model:?}", task.as_str()));
            }
        }
        if !(t.threshold.is_finite()) {
            return invalid("task.threshold must be finite".into());
        }
        self.train_config(self.train.seed)?;
        Ok(())
    }
}

/// The key table as shown by `--help`.
pub fn keys_help() -> String {
    let mut out = String::from("Config keys (`section.key = value`, `#` starts a comment):\n");
    for (key, default, doc) in KEYS {
        let _ = writeln!(out, "  {key:<28} {default:<10} {doc}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.schedule(), QuerySchedule::DEFAULT_ADAPTIVE);
        assert_eq!(cfg.adapter().unwrap().down.in_dim, 32);
        assert_eq!(RunConfig::parse_str("").unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse_str(
            "# stress run\nschedule.mode = fixed   # baseline\nrge.eta = 0.3\n\nadapter.down =\nadapter.up=\n",
        )
        .unwrap();
        assert_eq!(cfg.schedule(), QuerySchedule::Fixed { q: 1 });
        assert_eq!(cfg.train.eta, 0.3);
        assert_eq!(cfg.adapter().unwrap().down.out_dim, 8);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::parse_str("nonsense"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::parse_str("task.colour = red"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::parse_str("rge.eta = fast"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::parse_str("rge.eta = 1\nrge.eta = 2"), Err(ConfigError::Duplicate(_))));
        assert!(matches!(RunConfig::parse_str("rge.eta = -1"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::parse_str("model.kind = transformer"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::parse_str("adapter.down = 4,8,2,3"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::parse_str("schedule.alpha = 1.5"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn every_key_is_documented_and_settable() {
        let mut cfg = RunConfig::default();
        for (key, default, doc) in KEYS {
            assert!(!doc.is_empty());
            cfg.set(key, default).unwrap();
        }
        assert!(keys_help().lines().count() > KEYS.len());
    }
}
