//! Experiment harness for `ttzo`: run configuration, training jobs, seed
//! comparisons, variance tables, contraction timings and the invariant suite.

pub mod alloc_probe;
pub mod compare;
pub mod config;
pub mod contract_bench;
pub mod experiment;
pub mod variance;
pub mod verify;
