use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, DrrnetError>;

#[derive(Debug, thiserror::Error)]
pub enum DrrnetError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("weights file {path} is unreadable: {reason}")]
    MissingWeights { path: PathBuf, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input {h}x{w} is not divisible by 32")]
    InvalidResolution { h: usize, w: usize },
    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),
    #[error("{0} channels cannot be split into 4 equal groups")]
    ChannelIndivisible(usize),
    #[error("feature pyramid has {0} levels, expected 4")]
    IncompletePyramid(usize),
    #[error("non-finite values in {0}")]
    NanInput(&'static str),
    #[error("unpaired file: {0}")]
    UnpairedFile(String),
    #[error("cannot read image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("corrupt image {path}: {reason}")]
    CorruptImage { path: PathBuf, reason: String },
    #[error("dataset error: {0}")]
    DatasetError(String),
    #[error("non-finite loss at step {step} (lr {lr:e}, grad norm {grad_norm:e})")]
    NonFiniteLoss { step: usize, lr: f64, grad_norm: f64 },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DrrnetError {
    /// Stable machine-readable class name, printed by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Self::InvalidConfig(_) => "InvalidConfig",
            Self::MissingWeights { .. } => "MissingWeights",
            Self::ShapeMismatch(_) => "ShapeMismatch",
            Self::InvalidResolution { .. } => "InvalidResolution",
            Self::ResolutionMismatch(_) => "ResolutionMismatch",
            Self::ChannelIndivisible(_) => "ChannelIndivisible",
            Self::IncompletePyramid(_) => "IncompletePyramid",
            Self::NanInput(_) => "NanInput",
            Self::UnpairedFile(_) => "UnpairedFile",
            Self::UnreadableImage { .. } => "UnreadableImage",
            Self::CorruptImage { .. } => "CorruptImage",
            Self::DatasetError(_) => "DatasetError",
            Self::NonFiniteLoss { .. } => "NonFiniteLoss",
            Self::CheckpointMismatch(_) => "CheckpointMismatch",
            Self::Io { .. } => "IoError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}
