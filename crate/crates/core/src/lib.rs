//! Forward-pass-only fine-tuning with tensor-train adapters.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor_train`]: TT weight shapes, initialization and contraction.
//! * [`adapters`]: tensorized linear layers, adapter blocks and the flat
//!   parameter registry that the optimizer mutates in place.
//! * [`toy_models`]: frozen desk-scale backbones, synthetic datasets, losses
//!   and a first-order gradient oracle used only for verification.
//! * [`zo_engine`]: the zeroth-order optimizer (seeded perturbation replay,
//!   multi-query gradient estimation, adaptive query schedule, training loop).

pub mod adapters;
pub mod checkpoint;
pub mod metrics;
pub mod rng;
pub mod tensor_train;
pub mod toy_models;
pub mod zo_engine;
