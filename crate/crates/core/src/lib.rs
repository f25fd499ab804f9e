//! Desk-scale deep-network training with Bernoulli-gated stochastic-batch-size
//! optimizers.
//!
//! The crate is organised around three strategy families, each behind a trait
//! with a name-keyed registry so variants can be selected from a config file:
//!
//! * [`schedule`] — learning-rate annealing (constant, exponential, staircase,
//!   sigmoid).
//! * [`prob`] — per-parameter update-probability schemes (constant, local,
//!   global, combined).
//! * [`optim`] — update rules (plain SGD, the cumulative-moving-average gated
//!   rule, and its slow recomputing reference).
//!
//! Supporting modules provide a minimal reverse-mode engine over dense
//! tensors ([`graph`]), model builders with (layer, kind) parameter grouping
//! ([`model`]), dataset synthesis and IDX/CSV ingestion ([`data`]), and a
//! reproducible experiment harness ([`experiment`]).

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod prob;
pub mod rng;
pub mod schedule;
pub mod tensor;

// Compile the README's code blocks alongside the doctests.
#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
struct ReadmeDoctests;

pub use error::{ConfigError, DataError, GraphError, ModelError, OptimError, RunError, StrategyError};
pub use graph::{
    backward, backward_scaled, eval_scores, finite_difference_check, forward, forward_frozen,
    loss_at, FdReport, Layer, LossKind, LossValue, ModelGraph, ModelState, ParameterStore, Tape,
    Targets,
};
pub use model::{build_linear_regression, build_mlp, build_small_cnn, init_params, ParamKind, ParameterGroup};
pub use tensor::Tensor;
