//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by the tensor/graph engine.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite value produced by layer {layer_index} ({layer_kind})")]
    NonFinite {
        layer_index: usize,
        layer_kind: &'static str,
    },
    #[error("non-finite loss value")]
    NonFiniteLoss,
    #[error("tape was recorded at parameter revision {tape_revision} but store is at {store_revision}")]
    RevisionMismatch {
        tape_revision: u64,
        store_revision: u64,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("finite-difference step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("parameter count {count} exceeds the finite-difference budget of {budget}")]
    BudgetExceeded { count: usize, budget: usize },
}

/// Errors raised by model construction.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension must be positive: {0}")]
    NonPositiveDim(&'static str),
    #[error("spatial extent {extent} is not divisible by 2^{blocks} pooling stages")]
    Indivisible { extent: usize, blocks: usize },
    #[error("parameter id {id} out of range (model has {count} parameters)")]
    ParamOutOfRange { id: usize, count: usize },
}

/// Errors raised by dataset synthesis, ingestion and batching.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("degenerate dataset parameters: {0}")]
    Degenerate(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic number {got:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        got: u32,
        expected: u32,
    },
    #[error("{path}: truncated file, needed {needed} bytes at offset {offset} but only {available} remain")]
    Truncated {
        path: String,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("image file has {images} items but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("subsample fraction must be in (0, 1], got {0}")]
    FractionOutOfRange(f64),
    #[error("class {class} has no surviving examples after subsampling")]
    EmptyClass { class: usize },
    #[error("batch size must satisfy 1 <= size <= {n}, got {size}")]
    BadBatchSize { size: usize, n: usize },
}

/// Errors raised by learning-rate schedule or probability-scheme construction.
#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("unknown {family} \"{name}\"; known: {known}")]
    Unknown {
        family: &'static str,
        name: String,
        known: String,
    },
    #[error("invalid {family} parameter {param}: {msg}")]
    InvalidParam {
        family: &'static str,
        param: &'static str,
        msg: String,
    },
}

/// Errors raised by the optimizers.
#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {param} in group (layer {layer}, {kind})")]
    NonFiniteGradient {
        param: usize,
        layer: usize,
        kind: &'static str,
    },
    #[error("gradient length {got} does not match parameter count {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("reference update rule needs a gradient recomputation hook")]
    MissingRecompute,
    #[error("reference update rule is limited to {budget} parameters, model has {count}")]
    BudgetExceeded { count: usize, budget: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Errors raised while parsing or validating an experiment config.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("[{section}] {key}: {msg}")]
    Field {
        section: &'static str,
        key: &'static str,
        msg: String,
    },
    #[error("missing required key {key} in section [{section}]")]
    Missing {
        section: &'static str,
        key: &'static str,
    },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Strategy(#[from] StrategyError),
}

/// Top-level error for experiment runs.
#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("metrics file {path} is empty or has no complete trial")]
    EmptyMetrics { path: String },
}

impl RunError {
    /// True when the failure is numerical (non-finite values, budget guards)
    /// rather than a configuration or I/O problem.
    pub fn is_numerical(&self) -> bool {
        matches!(self, RunError::Graph(_) | RunError::Optim(_))
    }
}
