//! Desk-scale frozen backbones with injected adapters, synthetic datasets and
//! the losses the optimizer sees.
//!
//! Backbone weights come from a seeded random draw and never change; only the
//! adapter parameters in the flat vector `w` are trainable. Layer norms are
//! always frozen.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapters::{AdapterConfig, AdapterError, ParamKind, ParameterRegistry, TensorizedAdapter, TensorizedLinear};
use crate::rng::{derive_seed, Domain, GaussianStream};
use crate::tensor_train::core_gradients;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("bad dataset parameters: {0}")]
    BadParams(String),
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("batch does not fit model: {0}")]
    BatchMismatch(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    BlobsClassification,
    TokenPatternClassification,
    QuadraticProbe,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "blobs" | "blobs_classification" => Some(Self::BlobsClassification),
            "tokens" | "token_pattern_classification" => Some(Self::TokenPatternClassification),
            "quadratic" | "quadratic_probe" => Some(Self::QuadraticProbe),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::BlobsClassification => "blobs",
            Self::TokenPatternClassification => "tokens",
            Self::QuadraticProbe => "quadratic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inputs {
    Features(Array2<f64>),
    Tokens(Vec<Vec<usize>>),
    /// Inputs are irrelevant (quadratic probe); only the count is kept.
    Empty(usize),
}

impl Inputs {
    pub fn len(&self) -> usize {
        match self {
            Inputs::Features(x) => x.nrows(),
            Inputs::Tokens(t) => t.len(),
            Inputs::Empty(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Inputs {
        match self {
            Inputs::Features(x) => Inputs::Features(x.select(Axis(0), idx)),
            Inputs::Tokens(t) => Inputs::Tokens(idx.iter().map(|&i| t[i].clone()).collect()),
            Inputs::Empty(_) => Inputs::Empty(idx.len()),
        }
    }
}

/// A labelled synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    pub inputs: Inputs,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// A gathered mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Inputs,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch { inputs: self.inputs.select(idx), labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }

    /// Splits off the last `n` samples as a held-out set drawn from the same
    /// distribution.
    pub fn split_off(&mut self, n: usize) -> Dataset {
        let keep = self.len() - n.min(self.len());
        let tail: Vec<usize> = (keep..self.len()).collect();
        let head: Vec<usize> = (0..keep).collect();
        let held = Dataset {
            task: self.task,
            inputs: self.inputs.select(&tail),
            labels: self.labels[keep..].to_vec(),
            num_classes: self.num_classes,
        };
        self.inputs = self.inputs.select(&head);
        self.labels.truncate(keep);
        held
    }

    pub fn full_batch(&self) -> Batch {
        Batch { inputs: self.inputs.clone(), labels: self.labels.clone() }
    }

    /// Writes the line-delimited text form: a `#` header, then one sample per
    /// line as `label<TAB>values`, values comma-separated for features and
    /// space-separated for tokens. Floats use shortest round-trip formatting.
    pub fn export<W: Write>(&self, mut out: W) -> Result<(), ModelError> {
        let (kind, width) = match &self.inputs {
            Inputs::Features(x) => ("features", x.ncols()),
            Inputs::Tokens(t) => ("tokens", t.first().map_or(0, Vec::len)),
            Inputs::Empty(_) => ("empty", 0),
        };
        writeln!(
            out,
            "# ttzo-dataset v1 task={} classes={} inputs={kind} width={width} samples={}",
            self.task.as_str(),
            self.num_classes,
            self.len()
        )?;
        let mut line = String::new();
        for i in 0..self.len() {
            line.clear();
            write!(line, "{}\t", self.labels[i]).unwrap();
            match &self.inputs {
                Inputs::Features(x) => {
                    let row: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
                    line.push_str(&row.join(","));
                }
                Inputs::Tokens(t) => {
                    let row: Vec<String> = t[i].iter().map(|v| v.to_string()).collect();
                    line.push_str(&row.join(" "));
                }
                Inputs::Empty(_) => {}
            }
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn import<R: BufRead>(input: R) -> Result<Self, ModelError> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| ModelError::Format("empty input".into()))??;
        let mut fields = std::collections::HashMap::new();
        for tok in header.trim_start_matches('#').split_whitespace().skip(2) {
            if let Some((k, v)) = tok.split_once('=') {
                fields.insert(k.to_owned(), v.to_owned());
            }
        }
        let get = |k: &str| fields.get(k).cloned().ok_or_else(|| ModelError::Format(format!("header lacks {k}")));
        let task = TaskKind::parse(&get("task")?).ok_or_else(|| ModelError::Format("unknown task".into()))?;
        let parse_usize = |v: String| v.parse::<usize>().map_err(|e| ModelError::Format(format!("{v}: {e}")));
        let num_classes = parse_usize(get("classes")?)?;
        let width = parse_usize(get("width")?)?;
        let samples = parse_usize(get("samples")?)?;
        let kind = get("inputs")?;
        let mut labels = Vec::with_capacity(samples);
        let mut feats = Vec::new();
        let mut toks = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (label, rest) = line.split_once('\t').unwrap_or((line.as_str(), ""));
            labels.push(parse_usize(label.to_owned())?);
            match kind.as_str() {
                "features" => {
                    for v in rest.split(',') {
                        feats.push(v.parse::<f64>().map_err(|e| ModelError::Format(format!("{v}: {e}")))?);
                    }
                }
                "tokens" => {
                    toks.push(rest.split(' ').map(|v| parse_usize(v.to_owned())).collect::<Result<Vec<_>, _>>()?)
                }
                _ => {}
            }
        }
        if labels.len() != samples {
            return Err(ModelError::Format(format!("expected {samples} samples, read {}", labels.len())));
        }
        let inputs = match kind.as_str() {
            "features" => Inputs::Features(
                Array2::from_shape_vec((samples, width), feats).map_err(|e| ModelError::Format(e.to_string()))?,
            ),
            "tokens" => Inputs::Tokens(toks),
            "empty" => Inputs::Empty(samples),
            other => return Err(ModelError::Format(format!("unknown input kind {other}"))),
        };
        Ok(Self { task, inputs, labels, num_classes })
    }

    /// SHA-256 of the exported text form.
    pub fn checksum(&self) -> String {
        let mut buf = Vec::new();
        self.export(&mut buf).expect("in-memory write");
        hex(&Sha256::digest(&buf))
    }
}

/// Knobs for [`make_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub classes: usize,
    pub features: usize,
    /// Distance of every class center from the origin, in units of the
    /// within-class standard deviation.
    pub separation: f64,
    pub vocab: usize,
    pub seq_len: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self { classes: 2, features: 8, separation: 4.0, vocab: 32, seq_len: 16 }
    }
}

/// Token ids whose co-occurrence decides the label of the token task.
pub const MARKER_TOKENS: [usize; 2] = [1, 2];

/// Builds a deterministic synthetic dataset.
///
/// * blobs: unit-variance Gaussian clusters. Two classes sit at `+-sep * u`
///   for a random unit `u`; more classes sit at `sep * e_c`.
/// * tokens: label 1 iff both marker tokens occur in the sequence.
/// * quadratic: no inputs, all labels 0.
pub fn make_synthetic(
    task: TaskKind,
    samples: usize,
    seed: u64,
    params: &SyntheticParams,
) -> Result<Dataset, ModelError> {
    if samples < 2 {
        return Err(ModelError::BadParams(format!("need at least 2 samples, got {samples}")));
    }
    let mut rng = GaussianStream::new(derive_seed(seed, Domain::Data, task as u64, 0));
    match task {
        TaskKind::QuadraticProbe => {
            Ok(Dataset { task, inputs: Inputs::Empty(samples), labels: vec![0; samples], num_classes: 1 })
        }
        TaskKind::BlobsClassification => {
            let (c, f) = (params.classes, params.features);
            if c < 2 || samples < c || f == 0 {
                return Err(ModelError::BadParams(format!(
                    "blobs need classes >= 2, samples >= classes and features >= 1 (classes={c}, samples={samples}, features={f})"
                )));
            }
            if c > 2 && c > f {
                return Err(ModelError::BadParams(format!("{c} classes need at least {c} features")));
            }
            if !(params.separation.is_finite() && params.separation >= 0.0) {
                return Err(ModelError::BadParams("separation must be finite and nonnegative".into()));
            }
            let mut centers = Array2::<f64>::zeros((c, f));
            if c == 2 {
                let u: Vec<f64> = (0..f).map(|_| rng.next_normal()).collect();
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                for j in 0..f {
                    centers[[0, j]] = params.separation * u[j] / norm;
                    centers[[1, j]] = -params.separation * u[j] / norm;
                }
            } else {
                for k in 0..c {
                    centers[[k, k]] = params.separation;
                }
            }
            let labels: Vec<usize> = (0..samples).map(|i| i % c).collect();
            let x = Array2::from_shape_fn((samples, f), |(i, j)| centers[[labels[i], j]] + rng.next_normal());
            Ok(Dataset { task, inputs: Inputs::Features(x), labels, num_classes: c })
        }
        TaskKind::TokenPatternClassification => {
            let (v, len) = (params.vocab, params.seq_len);
            if v < MARKER_TOKENS.len() + 2 || len < 2 {
                return Err(ModelError::BadParams(format!("vocab {v} / seq_len {len} too small")));
            }
            let filler = |rng: &mut GaussianStream| loop {
                let t = rng.below(v as u64) as usize;
                if !MARKER_TOKENS.contains(&t) {
                    break t;
                }
            };
            let mut tokens = Vec::with_capacity(samples);
            let mut labels = Vec::with_capacity(samples);
            for i in 0..samples {
                let label = i % 2;
                let mut seq: Vec<usize> = (0..len).map(|_| filler(&mut rng)).collect();
                let mut positions: Vec<usize> = (0..len).collect();
                rng.shuffle(&mut positions);
                if label == 1 {
                    seq[positions[0]] = MARKER_TOKENS[0];
                    seq[positions[1]] = MARKER_TOKENS[1];
                } else {
                    // none, one or the other marker, but never both
                    match rng.below(3) {
                        0 => {}
                        1 => seq[positions[0]] = MARKER_TOKENS[0],
                        _ => seq[positions[0]] = MARKER_TOKENS[1],
                    }
                }
                tokens.push(seq);
                labels.push(label);
            }
            Ok(Dataset { task, inputs: Inputs::Tokens(tokens), labels, num_classes: 2 })
        }
    }
}

/// Loss surface seen by the optimizer: a pure function of `(w, batch)`.
pub trait Objective: Sync {
    /// Registry template: manifest plus the initial trainable vector.
    fn registry(&self) -> &ParameterRegistry;

    fn loss(&self, w: &[f64], batch: &Batch) -> Result<f64, ModelError>;

    /// SHA-256 over every frozen parameter.
    fn frozen_checksum(&self) -> String;

    /// Exact gradient when the model supports it.
    fn analytic_gradient(&self, _w: &[f64], _batch: &Batch) -> Option<Result<Vec<f64>, ModelError>> {
        None
    }

    /// Predicted class per sample, for accuracy reporting.
    fn predict(&self, _w: &[f64], _batch: &Batch) -> Option<Result<Vec<usize>, ModelError>> {
        None
    }

    fn dim(&self) -> usize {
        self.registry().dim()
    }
}

/// Snapshot of the model's trainable registry (manifest plus initial `w`).
pub fn collect_trainable(model: &dyn Objective) -> ParameterRegistry {
    model.registry().clone()
}

/// Loss evaluation with a length check on `w`.
pub fn loss_eval(model: &dyn Objective, w: &[f64], batch: &Batch) -> Result<f64, ModelError> {
    if w.len() != model.dim() {
        return Err(ModelError::LengthMismatch { expected: model.dim(), got: w.len() });
    }
    model.loss(w, batch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientMode {
    Analytic,
    /// Central differences with step `h`.
    CentralFd(f64),
}

/// First-order reference gradient, used only to verify the estimator.
pub fn gradient_oracle(
    model: &dyn Objective,
    w: &[f64],
    batch: &Batch,
    mode: GradientMode,
) -> Result<Vec<f64>, ModelError> {
    match mode {
        GradientMode::Analytic => model
            .analytic_gradient(w, batch)
            .unwrap_or_else(|| Err(ModelError::BatchMismatch("model has no analytic gradient".into()))),
        GradientMode::CentralFd(h) => {
            assert!(h > 0.0, "finite-difference step must be positive");
            let mut probe = w.to_vec();
            let mut grad = Vec::with_capacity(w.len());
            for i in 0..w.len() {
                let orig = probe[i];
                probe[i] = orig + h;
                let plus = model.loss(&probe, batch)?;
                probe[i] = orig - h;
                let minus = model.loss(&probe, batch)?;
                probe[i] = orig;
                grad.push((plus - minus) / (2.0 * h));
            }
            Ok(grad)
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn checksum_arrays<'a>(arrays: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut h = Sha256::new();
    for a in arrays {
        h.update((a.len() as u64).to_le_bytes());
        for v in a {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn finite(loss: f64) -> Result<f64, ModelError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(ModelError::NonFiniteLoss(loss))
    }
}

/// `0.5 * ||w||^2`, independent of the batch.
#[derive(Debug, Clone)]
pub struct QuadraticProbe {
    registry: ParameterRegistry,
}

impl QuadraticProbe {
    pub fn new(init: &[f64]) -> Self {
        let mut registry = ParameterRegistry::new();
        registry.add_trainable("probe.w", ParamKind::Weight, init).expect("weights are trainable");
        Self { registry }
    }
}

impl Objective for QuadraticProbe {
    fn registry(&self) -> &ParameterRegistry {
        &self.registry
    }

    fn loss(&self, w: &[f64], _batch: &Batch) -> Result<f64, ModelError> {
        finite(0.5 * w.iter().map(|v| v * v).sum::<f64>())
    }

    fn frozen_checksum(&self) -> String {
        checksum_arrays(std::iter::empty())
    }

    fn analytic_gradient(&self, w: &[f64], _batch: &Batch) -> Option<Result<Vec<f64>, ModelError>> {
        Some(Ok(w.to_vec()))
    }
}

/// Frozen layer norm over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self { gamma: Array1::ones(width), beta: Array1::zeros(width), eps: 1e-5 }
    }

    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mean = x.mean_axis(Axis(1)).expect("width > 0");
        let centered = &x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).expect("width > 0");
        let inv = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        centered * inv.view().insert_axis(Axis(1)) * &self.gamma + &self.beta
    }
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut GaussianStream) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| std * rng.next_normal())
}

/// Row-wise log-softmax cross-entropy, mean over rows, plus `softmax - onehot`.
fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    let mut total = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[labels[i]];
        for (j, v) in row.iter().enumerate() {
            grad[[i, j]] = (v - lse).exp() - if j == labels[i] { 1.0 } else { 0.0 };
        }
    }
    (total / n as f64, grad / n as f64)
}

fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Configuration shared by both backbones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Std multiplier for the frozen head; small values keep initial logits
    /// near zero.
    pub head_scale: f64,
    pub seed: u64,
}

/// `features -> relu(x W1 + b1) -> layer norm -> adapter -> head`.
///
/// The adapter sits after the frozen norm, so its output reaches the head
/// unnormalized and an unstable step size can blow the logits up.
#[derive(Debug, Clone)]
pub struct MlpModel {
    w1: Array2<f64>,
    b1: Array1<f64>,
    ln: LayerNorm,
    head: Array2<f64>,
    adapter: Option<TensorizedAdapter>,
    registry: ParameterRegistry,
}

impl MlpModel {
    pub fn new(cfg: &BackboneConfig, adapter: Option<&AdapterConfig>) -> Result<Self, ModelError> {
        let mut rng = GaussianStream::new(derive_seed(cfg.seed, Domain::Init, 0, 0));
        let w1 = gaussian_matrix(cfg.input_dim, cfg.hidden, (2.0 / cfg.input_dim as f64).sqrt(), &mut rng);
        let b1 = Array1::from_shape_fn(cfg.hidden, |_| 0.1 * rng.next_normal());
        let head = gaussian_matrix(cfg.hidden, cfg.classes, cfg.head_scale / (cfg.hidden as f64).sqrt(), &mut rng);
        let ln = LayerNorm::new(cfg.hidden);
        let mut registry = ParameterRegistry::new();
        registry.add_frozen("backbone.fc1.weight", ParamKind::Weight, w1.len());
        registry.add_frozen("backbone.fc1.bias", ParamKind::Bias, b1.len());
        registry.add_frozen("backbone.ln.gamma", ParamKind::LayerNorm, cfg.hidden);
        registry.add_frozen("backbone.ln.beta", ParamKind::LayerNorm, cfg.hidden);
        registry.add_frozen("backbone.head.weight", ParamKind::Weight, head.len());
        let adapter = match adapter {
            Some(a) => {
                if a.down.in_dim != cfg.hidden {
                    return Err(AdapterError::ShapeMismatch(format!(
                        "adapter width {} vs hidden {}",
                        a.down.in_dim, cfg.hidden
                    ))
                    .into());
                }
                Some(TensorizedAdapter::register(
                    &mut registry,
                    "adapter",
                    a,
                    derive_seed(cfg.seed, Domain::Init, 1, 0),
                )?)
            }
            None => None,
        };
        Ok(Self { w1, b1, ln, head, adapter, registry })
    }

    fn features<'a>(&self, batch: &'a Batch) -> Result<&'a Array2<f64>, ModelError> {
        match &batch.inputs {
            Inputs::Features(x) if x.ncols() == self.w1.nrows() => Ok(x),
            _ => Err(ModelError::BatchMismatch(format!("expected {} features", self.w1.nrows()))),
        }
    }

    fn hidden(&self, x: &Array2<f64>) -> Array2<f64> {
        (x.dot(&self.w1) + &self.b1).mapv(|v| v.max(0.0))
    }

    pub fn logits(&self, w: &[f64], batch: &Batch) -> Result<Array2<f64>, ModelError> {
        let h = self.ln.apply(self.hidden(self.features(batch)?).view());
        let h = match &self.adapter {
            Some(a) => a.forward(w, h.view())?,
            None => h,
        };
        Ok(h.dot(&self.head))
    }
}

impl Objective for MlpModel {
    fn registry(&self) -> &ParameterRegistry {
        &self.registry
    }

    fn loss(&self, w: &[f64], batch: &Batch) -> Result<f64, ModelError> {
        let logits = self.logits(w, batch)?;
        finite(cross_entropy(&logits, &batch.labels).0)
    }

    fn frozen_checksum(&self) -> String {
        checksum_arrays([
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.ln.gamma.as_slice().unwrap(),
            self.ln.beta.as_slice().unwrap(),
            self.head.as_slice().unwrap(),
        ])
    }

    fn predict(&self, w: &[f64], batch: &Batch) -> Option<Result<Vec<usize>, ModelError>> {
        Some(self.logits(w, batch).map(|l| argmax_rows(&l)))
    }

    /// Backpropagation through head, adapter and TT contraction.
    fn analytic_gradient(&self, w: &[f64], batch: &Batch) -> Option<Result<Vec<f64>, ModelError>> {
        let run = || -> Result<Vec<f64>, ModelError> {
            let mut grad = vec![0.0; w.len()];
            let Some(ad) = &self.adapter else { return Ok(grad) };
            let a1 = self.ln.apply(self.hidden(self.features(batch)?).view());
            let (pre, post, y) = ad.forward_traced(w, a1.view())?;
            let (_, d_logits) = cross_entropy(&y.dot(&self.head), &batch.labels);
            let d_y = d_logits.dot(&self.head.t());
            let d_post = layer_backward(&ad.up, w, &post, &d_y, &mut grad)?;
            let d_pre = d_post * &pre.mapv(|v| ad.activation.derivative(v));
            layer_backward(&ad.down, w, &a1, &d_pre, &mut grad)?;
            Ok(grad)
        };
        Some(run())
    }
}

/// Accumulates parameter gradients of `y = x W + b` into `grad` and returns
/// the input gradient.
fn layer_backward(
    layer: &TensorizedLinear,
    w: &[f64],
    x: &Array2<f64>,
    d_y: &Array2<f64>,
    grad: &mut [f64],
) -> Result<Array2<f64>, ModelError> {
    let factors = layer.factors(w)?;
    let d_w = x.t().dot(d_y);
    let core_grads = core_gradients(&factors, &layer.spec, &d_w).map_err(AdapterError::from)?;
    let mut at = layer.factors.offset;
    for g in core_grads {
        for v in g.iter() {
            grad[at] += v;
            at += 1;
        }
    }
    if let Some(b) = layer.bias {
        for (slot, v) in grad[b.range()].iter_mut().zip(d_y.sum_axis(Axis(0))) {
            *slot += v;
        }
    }
    Ok(d_y.dot(&layer.weight(w)?.t()))
}

/// Shape of the tiny transformer encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub ff_width: usize,
    pub classes: usize,
    pub head_scale: f64,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 32,
            heads: 2,
            seq_len: 16,
            vocab: 32,
            ff_width: 64,
            classes: 2,
            head_scale: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    ln1: LayerNorm,
    ff1: Array2<f64>,
    ff1_bias: Array1<f64>,
    ff2: Array2<f64>,
    ff2_bias: Array1<f64>,
    ln2: LayerNorm,
    attn_adapter: Option<TensorizedAdapter>,
    ff_adapter: Option<TensorizedAdapter>,
}

/// Post-norm encoder with adapters after the attention output and after the
/// feed-forward output, mean-pooled into a frozen classification head.
#[derive(Debug, Clone)]
pub struct TinyTransformer {
    cfg: TransformerConfig,
    embed: Array2<f64>,
    pos: Array2<f64>,
    layers: Vec<EncoderLayer>,
    head: Array2<f64>,
    registry: ParameterRegistry,
}

impl TinyTransformer {
    pub fn new(cfg: &TransformerConfig, adapter: Option<&AdapterConfig>) -> Result<Self, ModelError> {
        if !cfg.width.is_multiple_of(cfg.heads) {
            return Err(ModelError::BadParams(format!("width {} not divisible by {} heads", cfg.width, cfg.heads)));
        }
        if let Some(a) = adapter {
            if a.down.in_dim != cfg.width {
                return Err(AdapterError::ShapeMismatch(format!(
                    "adapter width {} vs model width {}",
                    a.down.in_dim, cfg.width
                ))
                .into());
            }
        }
        let mut rng = GaussianStream::new(derive_seed(cfg.seed, Domain::Init, 0, 0));
        let h = cfg.width;
        let mut registry = ParameterRegistry::new();
        let embed = gaussian_matrix(cfg.vocab, h, 1.0, &mut rng);
        let pos = gaussian_matrix(cfg.seq_len, h, 0.1, &mut rng);
        registry.add_frozen("backbone.embed", ParamKind::Embedding, embed.len());
        registry.add_frozen("backbone.pos", ParamKind::Embedding, pos.len());
        let std = 1.0 / (h as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let layer = EncoderLayer {
                wq: gaussian_matrix(h, h, std, &mut rng),
                wk: gaussian_matrix(h, h, std, &mut rng),
                wv: gaussian_matrix(h, h, std, &mut rng),
                wo: gaussian_matrix(h, h, std, &mut rng),
                ln1: LayerNorm::new(h),
                ff1: gaussian_matrix(h, cfg.ff_width, (2.0 / h as f64).sqrt(), &mut rng),
                ff1_bias: Array1::zeros(cfg.ff_width),
                ff2: gaussian_matrix(cfg.ff_width, h, 1.0 / (cfg.ff_width as f64).sqrt(), &mut rng),
                ff2_bias: Array1::zeros(h),
                ln2: LayerNorm::new(h),
                attn_adapter: None,
                ff_adapter: None,
            };
            for (name, len, kind) in [
                ("attn.wq", h * h, ParamKind::Weight),
                ("attn.wk", h * h, ParamKind::Weight),
                ("attn.wv", h * h, ParamKind::Weight),
                ("attn.wo", h * h, ParamKind::Weight),
                ("ln1.gamma", h, ParamKind::LayerNorm),
                ("ln1.beta", h, ParamKind::LayerNorm),
                ("ff1.weight", h * cfg.ff_width, ParamKind::Weight),
                ("ff1.bias", cfg.ff_width, ParamKind::Bias),
                ("ff2.weight", cfg.ff_width * h, ParamKind::Weight),
                ("ff2.bias", h, ParamKind::Bias),
                ("ln2.gamma", h, ParamKind::LayerNorm),
                ("ln2.beta", h, ParamKind::LayerNorm),
            ] {
                registry.add_frozen(format!("backbone.layer{l}.{name}"), kind, len);
            }
            layers.push(layer);
        }
        let head = gaussian_matrix(h, cfg.classes, cfg.head_scale / (h as f64).sqrt(), &mut rng);
        registry.add_frozen("backbone.head.weight", ParamKind::Weight, head.len());
        if let Some(a) = adapter {
            for (l, layer) in layers.iter_mut().enumerate() {
                layer.attn_adapter = Some(TensorizedAdapter::register(
                    &mut registry,
                    &format!("layer{l}.attn_adapter"),
                    a,
                    derive_seed(cfg.seed, Domain::Init, 1, 2 * l as u64),
                )?);
                layer.ff_adapter = Some(TensorizedAdapter::register(
                    &mut registry,
                    &format!("layer{l}.ff_adapter"),
                    a,
                    derive_seed(cfg.seed, Domain::Init, 1, 2 * l as u64 + 1),
                )?);
            }
        }
        Ok(Self { cfg: cfg.clone(), embed, pos, layers, head, registry })
    }

    pub fn logits(&self, w: &[f64], batch: &Batch) -> Result<Array2<f64>, ModelError> {
        let Inputs::Tokens(seqs) = &batch.inputs else {
            return Err(ModelError::BatchMismatch("expected token inputs".into()));
        };
        let (l, h) = (self.cfg.seq_len, self.cfg.width);
        let n = seqs.len();
        let mut x = Array2::zeros((n * l, h));
        for (i, seq) in seqs.iter().enumerate() {
            if seq.len() != l || seq.iter().any(|&t| t >= self.cfg.vocab) {
                return Err(ModelError::BatchMismatch(format!("sequence {i} has bad length or token id")));
            }
            for (p, &t) in seq.iter().enumerate() {
                let row = &self.embed.row(t) + &self.pos.row(p);
                x.row_mut(i * l + p).assign(&row);
            }
        }
        let heads = self.cfg.heads;
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            let q = x.dot(&layer.wq);
            let k = x.dot(&layer.wk);
            let v = x.dot(&layer.wv);
            let mut attn = Array2::zeros((n * l, h));
            for i in 0..n {
                let rows = s![i * l..(i + 1) * l, ..];
                for hd in 0..heads {
                    let cols = s![.., hd * dh..(hd + 1) * dh];
                    let qh = q.slice(rows).slice_move(cols);
                    let kh = k.slice(rows).slice_move(cols);
                    let vh = v.slice(rows).slice_move(cols);
                    let mut scores = qh.dot(&kh.t()) * scale;
                    for mut r in scores.rows_mut() {
                        let max = r.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                        r.mapv_inplace(|v| (v - max).exp());
                        let sum = r.sum();
                        r /= sum;
                    }
                    attn.slice_mut(s![i * l..(i + 1) * l, hd * dh..(hd + 1) * dh]).assign(&scores.dot(&vh));
                }
            }
            let mut attn_out = attn.dot(&layer.wo);
            if let Some(a) = &layer.attn_adapter {
                attn_out = a.forward(w, attn_out.view())?;
            }
            x = layer.ln1.apply((&x + &attn_out).view());
            let mut ff = (x.dot(&layer.ff1) + &layer.ff1_bias).mapv(|v| v.max(0.0)).dot(&layer.ff2) + &layer.ff2_bias;
            if let Some(a) = &layer.ff_adapter {
                ff = a.forward(w, ff.view())?;
            }
            x = layer.ln2.apply((&x + &ff).view());
        }
        let pooled = x.into_shape_with_order((n, l, h)).expect("contiguous").mean_axis(Axis(1)).expect("seq_len > 0");
        Ok(pooled.dot(&self.head))
    }
}

impl Objective for TinyTransformer {
    fn registry(&self) -> &ParameterRegistry {
        &self.registry
    }

    fn loss(&self, w: &[f64], batch: &Batch) -> Result<f64, ModelError> {
        let logits = self.logits(w, batch)?;
        finite(cross_entropy(&logits, &batch.labels).0)
    }

    fn frozen_checksum(&self) -> String {
        let mut arrays: Vec<&[f64]> = vec![self.embed.as_slice().unwrap(), self.pos.as_slice().unwrap()];
        for l in &self.layers {
            arrays.extend([
                l.wq.as_slice().unwrap(),
                l.wk.as_slice().unwrap(),
                l.wv.as_slice().unwrap(),
                l.wo.as_slice().unwrap(),
                l.ln1.gamma.as_slice().unwrap(),
                l.ln1.beta.as_slice().unwrap(),
                l.ff1.as_slice().unwrap(),
                l.ff1_bias.as_slice().unwrap(),
                l.ff2.as_slice().unwrap(),
                l.ff2_bias.as_slice().unwrap(),
                l.ln2.gamma.as_slice().unwrap(),
                l.ln2.beta.as_slice().unwrap(),
            ]);
        }
        arrays.push(self.head.as_slice().unwrap());
        checksum_arrays(arrays)
    }

    fn predict(&self, w: &[f64], batch: &Batch) -> Option<Result<Vec<usize>, ModelError>> {
        Some(self.logits(w, batch).map(|l| argmax_rows(&l)))
    }
}

/// Fraction of correct predictions, when the model can predict.
pub fn accuracy(model: &dyn Objective, w: &[f64], batch: &Batch) -> Option<Result<f64, ModelError>> {
    model.predict(w, batch).map(|p| {
        p.map(|pred| {
            let hits = pred.iter().zip(&batch.labels).filter(|(a, b)| a == b).count();
            hits as f64 / batch.len().max(1) as f64
        })
    })
}
