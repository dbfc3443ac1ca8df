//! Tensorized linear layers, adapter blocks and the flat parameter registry.
//!
//! Every trainable scalar lives in one flat vector `w` owned by a
//! [`ParameterRegistry`]. Layers only remember where their parameters sit in
//! that vector, so the optimizer can perturb `w` in place and the next
//! forward pass sees the perturbed weights without any copying.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_train::{init_factors, materialize_parallel, InitPolicy, TtError, TtFactors, TtSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error(transparent)]
    Tt(#[from] TtError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("parameter `{0}` must stay frozen")]
    FrozenOnly(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("segment {offset}+{len} out of range for `{name}` (length {available})")]
    SegmentOutOfRange { name: String, offset: usize, len: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Frozen,
    Trainable,
}

/// What a registry entry holds. Layer-norm entries can only be frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    TtCore,
    Bias,
    Weight,
    Embedding,
    LayerNorm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub role: Role,
    pub kind: ParamKind,
    /// Offset into the flat vector of the entry's role.
    pub offset: usize,
    pub len: usize,
}

/// Location of one trainable block inside `w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub offset: usize,
    pub len: usize,
}

impl ParamSlot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    pub fn view<'a>(&self, w: &'a [f64]) -> &'a [f64] {
        &w[self.range()]
    }
}

/// Manifest of every model parameter plus the flat trainable vector `w`.
///
/// Trainable entries are packed contiguously into `w` in registration order;
/// frozen entries get offsets in a separate address space and their values
/// stay with the model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterRegistry {
    entries: Vec<ParamEntry>,
    w: Vec<f64>,
    frozen_len: usize,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_trainable(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        values: &[f64],
    ) -> Result<ParamSlot, AdapterError> {
        let name = name.into();
        if kind == ParamKind::LayerNorm {
            return Err(AdapterError::FrozenOnly(name));
        }
        let slot = ParamSlot { offset: self.w.len(), len: values.len() };
        self.entries.push(ParamEntry { name, role: Role::Trainable, kind, offset: slot.offset, len: slot.len });
        self.w.extend_from_slice(values);
        Ok(slot)
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, kind: ParamKind, len: usize) {
        self.entries.push(ParamEntry { name: name.into(), role: Role::Frozen, kind, offset: self.frozen_len, len });
        self.frozen_len += len;
    }

    /// Number of trainable scalars `d`.
    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn frozen_len(&self) -> usize {
        self.frozen_len
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn trainable(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| e.role == Role::Trainable)
    }

    pub fn frozen(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| e.role == Role::Frozen)
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry, AdapterError> {
        self.entries.iter().find(|e| e.name == name).ok_or_else(|| AdapterError::UnknownParameter(name.to_owned()))
    }

    pub fn flat(&self) -> &[f64] {
        &self.w
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.w
    }

    pub fn read_flat(&self) -> Vec<f64> {
        self.w.clone()
    }

    pub fn write_flat(&mut self, w: &[f64]) -> Result<(), AdapterError> {
        if w.len() != self.w.len() {
            return Err(AdapterError::LengthMismatch { expected: self.w.len(), got: w.len() });
        }
        self.w.copy_from_slice(w);
        Ok(())
    }

    /// Writes `values` at `offset` within the trainable entry `name`.
    pub fn write_segment(&mut self, name: &str, offset: usize, values: &[f64]) -> Result<(), AdapterError> {
        let entry = self.entry(name)?;
        if entry.role == Role::Frozen {
            return Err(AdapterError::FrozenOnly(name.to_owned()));
        }
        if offset + values.len() > entry.len {
            return Err(AdapterError::SegmentOutOfRange {
                name: name.to_owned(),
                offset,
                len: values.len(),
                available: entry.len,
            });
        }
        let start = entry.offset + offset;
        self.w[start..start + values.len()].copy_from_slice(values);
        Ok(())
    }

    /// Checks that offsets are contiguous per role and that `d` adds up.
    pub fn check_layout(&self) -> bool {
        let mut next = [0usize; 2];
        for e in &self.entries {
            let slot = &mut next[(e.role == Role::Trainable) as usize];
            if e.offset != *slot {
                return false;
            }
            *slot += e.len;
        }
        next[1] == self.w.len()
            && next[0] == self.frozen_len
            && self.entries.iter().all(|e| e.kind != ParamKind::LayerNorm || e.role == Role::Frozen)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
            }
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                let u = c * (x + 0.044715 * x.powi(3));
                let t = u.tanh();
                let du = c * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Self::Relu),
            "tanh" => Some(Self::Tanh),
            "gelu" => Some(Self::Gelu),
            _ => None,
        }
    }
}

/// Linear layer whose weight is stored in TT format inside `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorizedLinear {
    pub spec: TtSpec,
    pub factors: ParamSlot,
    pub bias: Option<ParamSlot>,
    /// Group count for the grouped contraction used in `forward`.
    pub parts: usize,
}

impl TensorizedLinear {
    /// Registers the layer's cores (and bias) as trainable entries.
    pub fn register(
        reg: &mut ParameterRegistry,
        name: &str,
        spec: TtSpec,
        init: &TtFactors,
        bias: bool,
    ) -> Result<Self, AdapterError> {
        init.check(&spec)?;
        let factors = reg.add_trainable(format!("{name}.cores"), ParamKind::TtCore, &init.to_flat())?;
        let bias = if bias {
            Some(reg.add_trainable(format!("{name}.bias"), ParamKind::Bias, &vec![0.0; spec.out_dim])?)
        } else {
            None
        };
        Ok(Self { spec, factors, bias, parts: 2 })
    }

    pub fn in_dim(&self) -> usize {
        self.spec.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim
    }

    /// Trainable scalars: TT cores plus bias.
    pub fn param_count(&self) -> usize {
        self.factors.len + self.bias.map_or(0, |b| b.len)
    }

    pub fn factors(&self, w: &[f64]) -> Result<TtFactors, AdapterError> {
        Ok(TtFactors::from_flat(&self.spec, self.factors.view(w))?)
    }

    pub fn weight(&self, w: &[f64]) -> Result<Array2<f64>, AdapterError> {
        Ok(materialize_parallel(&self.factors(w)?, &self.spec, self.parts)?)
    }

    pub fn bias_vector(&self, w: &[f64]) -> Option<Array1<f64>> {
        self.bias.map(|b| Array1::from(b.view(w).to_vec()))
    }

    /// `x W + b` for a `batch x m` input.
    pub fn forward(&self, w: &[f64], x: ArrayView2<'_, f64>) -> Result<Array2<f64>, AdapterError> {
        if x.ncols() != self.spec.in_dim {
            return Err(AdapterError::ShapeMismatch(format!(
                "input has {} columns, layer expects {}",
                x.ncols(),
                self.spec.in_dim
            )));
        }
        let mut y = x.dot(&self.weight(w)?);
        if let Some(b) = self.bias_vector(w) {
            y += &b;
        }
        Ok(y)
    }
}

/// Bottleneck adapter: `x + up(act(down(x)))`, or without the skip when
/// `residual` is false.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorizedAdapter {
    pub down: TensorizedLinear,
    pub up: TensorizedLinear,
    pub activation: Activation,
    pub residual: bool,
}

/// Shapes and switches for one adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub down: TtSpec,
    pub up: TtSpec,
    pub activation: Activation,
    pub residual: bool,
    pub bias: bool,
}

impl AdapterConfig {
    /// Adapter for hidden width `hidden` and bottleneck `bottleneck`, with the
    /// up-projection using the reversed mode order of the down-projection.
    pub fn balanced(hidden: usize, bottleneck: usize, order: usize, rank: usize) -> Result<Self, TtError> {
        let down = TtSpec::balanced(hidden, bottleneck, order, rank)?;
        let up = TtSpec::new(
            bottleneck,
            hidden,
            down.out_factors.iter().rev().copied().collect(),
            down.in_factors.iter().rev().copied().collect(),
            rank,
        )?;
        Ok(Self { down, up, activation: Activation::Relu, residual: true, bias: true })
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        self.down.validate()?;
        self.up.validate()?;
        if self.down.out_dim != self.up.in_dim || self.up.out_dim != self.down.in_dim {
            return Err(AdapterError::ShapeMismatch(format!(
                "down {}x{} does not chain with up {}x{}",
                self.down.in_dim, self.down.out_dim, self.up.in_dim, self.up.out_dim
            )));
        }
        Ok(())
    }

    /// Trainable scalars this adapter adds.
    pub fn param_count(&self) -> usize {
        let bias = if self.bias { self.down.out_dim + self.up.out_dim } else { 0 };
        self.down.param_count() + self.up.param_count() + bias
    }
}

impl TensorizedAdapter {
    /// Registers an adapter: balanced-Gaussian down cores, zero-up up cores,
    /// zero biases. With `residual` on, the adapter starts as the identity.
    pub fn register(
        reg: &mut ParameterRegistry,
        name: &str,
        cfg: &AdapterConfig,
        seed: u64,
    ) -> Result<Self, AdapterError> {
        cfg.validate()?;
        let down_init = init_factors(&cfg.down, seed, InitPolicy::BalancedGaussian);
        let up_init = init_factors(&cfg.up, seed ^ 0x5555_5555_5555_5555, InitPolicy::ZeroUp);
        let down = TensorizedLinear::register(reg, &format!("{name}.down"), cfg.down.clone(), &down_init, cfg.bias)?;
        let up = TensorizedLinear::register(reg, &format!("{name}.up"), cfg.up.clone(), &up_init, cfg.bias)?;
        Ok(Self { down, up, activation: cfg.activation, residual: cfg.residual })
    }

    pub fn hidden_dim(&self) -> usize {
        self.down.in_dim()
    }

    pub fn param_count(&self) -> usize {
        self.down.param_count() + self.up.param_count()
    }

    pub fn forward(&self, w: &[f64], x: ArrayView2<'_, f64>) -> Result<Array2<f64>, AdapterError> {
        let mut h = self.down.forward(w, x)?;
        h.mapv_inplace(|v| self.activation.apply(v));
        let mut y = self.up.forward(w, h.view())?;
        if self.residual {
            y += &x;
        }
        Ok(y)
    }

    /// Forward pass that also returns the intermediate activations needed by
    /// the verification gradient: `(pre_activation, post_activation, output)`.
    #[allow(clippy::type_complexity)]
    pub fn forward_traced(
        &self,
        w: &[f64],
        x: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>), AdapterError> {
        let pre = self.down.forward(w, x)?;
        let post = pre.mapv(|v| self.activation.apply(v));
        let mut y = self.up.forward(w, post.view())?;
        if self.residual {
            y += &x;
        }
        Ok((pre, post, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_train::materialize_sequential;
    use ndarray::{arr2, Array3};

    fn rank1_layer(reg: &mut ParameterRegistry) -> TensorizedLinear {
        let spec = TtSpec::new(2, 2, vec![2], vec![2], 1).unwrap();
        let f = TtFactors {
            cores: vec![
                Array3::from_shape_vec((1, 2, 1), vec![1.0, 2.0]).unwrap(),
                Array3::from_shape_vec((1, 2, 1), vec![3.0, 4.0]).unwrap(),
            ],
        };
        TensorizedLinear::register(reg, "l", spec, &f, true).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut s = crate::rng::GaussianStream::new(seed);
        Array2::from_shape_fn((rows, cols), |_| s.next_normal())
    }

    fn dense_adapter(ad: &TensorizedAdapter, w: &[f64], x: &Array2<f64>) -> Array2<f64> {
        // straight-line reference with explicit loops over sequentially
        // materialized weights
        let wd = materialize_sequential(&ad.down.factors(w).unwrap(), &ad.down.spec).unwrap();
        let wu = materialize_sequential(&ad.up.factors(w).unwrap(), &ad.up.spec).unwrap();
        let bd = ad.down.bias_vector(w).unwrap();
        let bu = ad.up.bias_vector(w).unwrap();
        let (n, h) = x.dim();
        let b = wd.ncols();
        let mut out = Array2::zeros((n, h));
        for r in 0..n {
            let mut mid = vec![0.0; b];
            for (j, m) in mid.iter_mut().enumerate() {
                let mut acc = bd[j];
                for i in 0..h {
                    acc += x[[r, i]] * wd[[i, j]];
                }
                *m = ad.activation.apply(acc);
            }
            for i in 0..h {
                let mut acc = bu[i];
                for (j, m) in mid.iter().enumerate() {
                    acc += m * wu[[j, i]];
                }
                out[[r, i]] = acc + if ad.residual { x[[r, i]] } else { 0.0 };
            }
        }
        out
    }

    #[test]
    fn rank1_forward() {
        let mut reg = ParameterRegistry::new();
        let layer = rank1_layer(&mut reg);
        let y = layer.forward(reg.flat(), arr2(&[[1.0, 0.0]]).view()).unwrap();
        assert_eq!(y, arr2(&[[3.0, 4.0]]));
    }

    #[test]
    fn zero_factors_output_bias() {
        let spec = TtSpec::from_modes(&[2, 3, 2, 2], 2).unwrap();
        let mut reg = ParameterRegistry::new();
        let layer = TensorizedLinear::register(&mut reg, "l", spec.clone(), &TtFactors::zeros(&spec), true).unwrap();
        reg.write_segment("l.bias", 0, &[1.5, -2.0, 0.25, 7.0]).unwrap();
        let y = layer.forward(reg.flat(), random_matrix(5, 6, 1).view()).unwrap();
        for row in y.rows() {
            assert_eq!(row.to_vec(), vec![1.5, -2.0, 0.25, 7.0]);
        }
    }

    #[test]
    fn forward_matches_sequential_oracle() {
        let spec = TtSpec::from_modes(&[4, 2, 4, 2, 2, 2], 3).unwrap();
        let mut reg = ParameterRegistry::new();
        let f = init_factors(&spec, 4, InitPolicy::BalancedGaussian);
        let layer = TensorizedLinear::register(&mut reg, "l", spec.clone(), &f, true).unwrap();
        reg.write_segment("l.bias", 0, &random_matrix(1, 8, 2).into_raw_vec_and_offset().0).unwrap();
        let x = random_matrix(7, 32, 3);
        let y = layer.forward(reg.flat(), x.view()).unwrap();
        let expected = x.dot(&materialize_sequential(&f, &spec).unwrap()) + &layer.bias_vector(reg.flat()).unwrap();
        let err = (&y - &expected).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 1e-10, "err {err}");
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mut reg = ParameterRegistry::new();
        let layer = rank1_layer(&mut reg);
        assert!(matches!(
            layer.forward(reg.flat(), random_matrix(2, 3, 0).view()),
            Err(AdapterError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_up_adapter_is_identity() {
        let cfg = AdapterConfig::balanced(32, 8, 2, 2).unwrap();
        let mut reg = ParameterRegistry::new();
        let ad = TensorizedAdapter::register(&mut reg, "a", &cfg, 11).unwrap();
        let x = random_matrix(4, 32, 5);
        let y = ad.forward(reg.flat(), x.view()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn identity_factors_without_residual() {
        // h = b = 4 with modes [2,2 | 2,2]; the identity is kron(I2, I2),
        // which needs rank 4 to carry (i1, i2) through the middle bond.
        let spec = TtSpec::from_modes(&[2, 2, 2, 2], 4).unwrap();
        let mut c1 = Array3::zeros((1, 2, 4));
        let mut c2 = Array3::zeros((4, 2, 4));
        let mut c3 = Array3::zeros((4, 2, 4));
        let mut c4 = Array3::zeros((4, 2, 1));
        for i1 in 0..2 {
            c1[[0, i1, i1]] = 1.0;
            for i2 in 0..2 {
                // state (i1, i2) encoded as 2*i1 + i2
                c2[[i1, i2, 2 * i1 + i2]] = 1.0;
                // j1 must equal i1; keep i2
                c3[[2 * i1 + i2, i1, i2]] = 1.0;
                // j2 must equal i2
                c4[[i2, i2, 0]] = 1.0;
            }
        }
        let ident = TtFactors { cores: vec![c1, c2, c3, c4] };
        assert_eq!(materialize_sequential(&ident, &spec).unwrap(), Array2::<f64>::eye(4));

        let mut reg = ParameterRegistry::new();
        let cfg = AdapterConfig {
            down: spec.clone(),
            up: spec.clone(),
            activation: Activation::Relu,
            residual: false,
            bias: true,
        };
        let ad = TensorizedAdapter::register(&mut reg, "a", &cfg, 0).unwrap();
        let flat = ident.to_flat();
        reg.write_segment("a.down.cores", 0, &flat).unwrap();
        reg.write_segment("a.up.cores", 0, &flat).unwrap();
        let x = random_matrix(6, 4, 8).mapv(f64::abs);
        let y = ad.forward(reg.flat(), x.view()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn random_adapter_matches_dense_oracle() {
        for (act, residual) in [(Activation::Relu, true), (Activation::Tanh, false), (Activation::Gelu, true)] {
            let mut cfg = AdapterConfig::balanced(32, 8, 2, 3).unwrap();
            cfg.activation = act;
            cfg.residual = residual;
            let mut reg = ParameterRegistry::new();
            let ad = TensorizedAdapter::register(&mut reg, "a", &cfg, 21).unwrap();
            let noise = random_matrix(1, reg.dim(), 22).into_raw_vec_and_offset().0;
            reg.write_flat(&noise).unwrap();
            let x = random_matrix(5, 32, 23);
            let y = ad.forward(reg.flat(), x.view()).unwrap();
            let expected = dense_adapter(&ad, reg.flat(), &x);
            let err = (&y - &expected).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err <= 1e-10, "{act:?}: err {err}");
        }
    }

    #[test]
    fn registry_counts_and_layout() {
        let down = TtSpec::from_modes(&[4, 8, 2, 4], 2).unwrap();
        let up = TtSpec::from_modes(&[2, 4, 4, 8], 2).unwrap();
        let cfg = AdapterConfig {
            down: down.clone(),
            up: up.clone(),
            activation: Activation::Relu,
            residual: true,
            bias: true,
        };
        let mut reg = ParameterRegistry::new();
        reg.add_frozen("backbone.w", ParamKind::Weight, 100);
        reg.add_frozen("ln.gamma", ParamKind::LayerNorm, 32);
        TensorizedAdapter::register(&mut reg, "a", &cfg, 0).unwrap();
        assert_eq!(down.param_count(), 56);
        assert_eq!(up.param_count(), 52);
        assert_eq!(reg.dim(), 56 + 52 + 8 + 32);
        assert_eq!(cfg.param_count(), reg.dim());
        assert!(reg.check_layout());
        assert_eq!(reg.frozen_len(), 132);
        assert!(matches!(reg.add_trainable("ln.beta", ParamKind::LayerNorm, &[0.0]), Err(AdapterError::FrozenOnly(_))));
    }

    #[test]
    fn flat_round_trip_and_length_check() {
        let cfg = AdapterConfig::balanced(32, 8, 2, 2).unwrap();
        let mut reg = ParameterRegistry::new();
        TensorizedAdapter::register(&mut reg, "a", &cfg, 0).unwrap();
        let v = random_matrix(1, reg.dim(), 9).into_raw_vec_and_offset().0;
        reg.write_flat(&v).unwrap();
        assert_eq!(reg.read_flat(), v);
        assert_eq!(reg.write_flat(&v[1..]), Err(AdapterError::LengthMismatch { expected: v.len(), got: v.len() - 1 }));
    }

    #[test]
    fn write_zeros_zeroes_adapter_weights() {
        let cfg = AdapterConfig::balanced(32, 8, 2, 2).unwrap();
        let mut reg = ParameterRegistry::new();
        let ad = TensorizedAdapter::register(&mut reg, "a", &cfg, 3).unwrap();
        reg.write_flat(&vec![0.0; reg.dim()]).unwrap();
        assert!(ad.down.weight(reg.flat()).unwrap().iter().all(|&v| v == 0.0));
        assert!(ad.up.weight(reg.flat()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn partial_write_touches_one_segment() {
        let cfg = AdapterConfig::balanced(32, 8, 2, 2).unwrap();
        let mut reg = ParameterRegistry::new();
        TensorizedAdapter::register(&mut reg, "a", &cfg, 3).unwrap();
        let before = reg.read_flat();
        reg.write_segment("a.up.cores", 3, &[9.0, 9.0]).unwrap();
        let e = reg.entry("a.up.cores").unwrap().clone();
        let after = reg.read_flat();
        for (i, (a, b)) in before.iter().zip(&after).enumerate() {
            if i == e.offset + 3 || i == e.offset + 4 {
                assert_eq!(*b, 9.0);
            } else {
                assert_eq!(a.to_bits(), b.to_bits(), "index {i} changed");
            }
        }
        assert!(matches!(
            reg.write_segment("a.up.cores", e.len - 1, &[1.0, 2.0]),
            Err(AdapterError::SegmentOutOfRange { .. })
        ));
        assert!(reg.write_segment("nope", 0, &[1.0]).is_err());
    }

    #[test]
    fn chain_mismatch_rejected() {
        let mut cfg = AdapterConfig::balanced(32, 8, 2, 2).unwrap();
        cfg.up = TtSpec::from_modes(&[2, 2, 4, 8], 2).unwrap();
        assert!(matches!(cfg.validate(), Err(AdapterError::ShapeMismatch(_))));
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            for act in [Activation::Gelu, Activation::Tanh] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8);
            }
        }
    }
}
