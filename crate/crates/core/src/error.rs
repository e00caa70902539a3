use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("attention row {row} has no admissible key")]
    FullyMaskedRow { row: usize },

    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("row {row} of {what} is not unit-normalized (norm {norm})")]
    NotNormalized {
        what: &'static str,
        row: usize,
        norm: f64,
    },

    #[error("alpha must be non-negative, got {0}")]
    NegativeAlpha(f64),

    #[error("invalid rule: {0}")]
    Rule(String),

    #[error("invalid split: {0}")]
    Split(String),

    #[error("invalid episode request: {0}")]
    Episode(String),

    #[error("codec: {0}")]
    Codec(String),

    #[error("step {step} is outside the schedule [0, {steps}]")]
    ScheduleRange { step: usize, steps: usize },

    #[error("invalid train config: {0}")]
    TrainConfig(String),

    /// Carries the state from before the failing step.
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged {
        step: usize,
        loss: f64,
        last: Box<crate::train::Checkpoint>,
    },

    #[error("checkpoint: bad magic")]
    BadMagic,

    #[error("checkpoint: version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint: config digest mismatch")]
    DigestMismatch,

    #[error("checkpoint: truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: unknown key `{0}`")]
    UnknownKey(String),

    #[error("config: key `{key}` expects {expected}, got `{value}`")]
    ConfigType {
        key: String,
        expected: String,
        value: String,
    },

    #[error("config: {0}")]
    ConfigSyntax(String),

    #[error("ablation: {0}")]
    Ablation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by bad user input (config keys, values) rather
    /// than by a failed run.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::UnknownKey(_)
                | Error::ConfigType { .. }
                | Error::ConfigSyntax(_)
                | Error::ModelConfig(_)
                | Error::TrainConfig(_)
        )
    }
}
