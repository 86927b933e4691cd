//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by the data generators, the model, and the analysis
/// and steering stages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value violates its documented invariants.
    #[error("config error: {0}")]
    Config(String),

    /// An example lacks the metadata needed to classify an output.
    #[error("example metadata error: {0}")]
    Meta(String),

    /// Tensor or sequence shape mismatch (overlong input, bad token id, wrong width).
    #[error("shape error: {0}")]
    Shape(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}: {detail}")]
    NanLoss { step: u64, detail: String },

    /// Training hit `max_steps` before reaching the stopping criterion.
    #[error("budget exceeded after {steps} steps (last eval: gen {gen_frac:.3}, mem {mem_frac:.3})")]
    BudgetExceeded {
        steps: u64,
        gen_frac: f64,
        mem_frac: f64,
    },

    /// File does not have the expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// File was written by an unsupported format version.
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// Pair capture collected too few divergent pairs.
    #[error("yield too low: {collected} of {target} pairs after {attempts} attempts")]
    YieldTooLow {
        collected: usize,
        target: usize,
        attempts: usize,
    },

    /// A statistic was requested over an empty dataset.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// Layer index outside `0..n_layers`.
    #[error("layer {layer} out of range (model has {n_layers} layers)")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    /// Statistics from different models or datasets were combined.
    #[error("fingerprint mismatch: {0}")]
    FingerprintMismatch(String),

    /// A spec was applied to a model with a different layer count or width.
    #[error("architecture mismatch: spec is {spec_layers}x{spec_width}, model is {model_layers}x{model_width}")]
    ArchitectureMismatch {
        spec_layers: usize,
        spec_width: usize,
        model_layers: usize,
        model_width: usize,
    },

    /// No evaluation examples remained after pre-filtering.
    #[error("empty evaluation set: {0}")]
    EmptyEvalSet(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
