use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is below 1e-12")]
    ZeroVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("margin split {first} + {second} does not equal m = {total}")]
    SplitMismatch { first: f64, second: f64, total: f64 },

    #[error("class centers {a} and {b} coincide (inter-class angle {angle:e})")]
    DegenerateCenter { a: usize, b: usize, angle: f64 },

    #[error("invalid margin config: {0}")]
    InvalidMarginConfig(String),

    #[error("objective is not finite at coordinate {index}")]
    NonFiniteObjective { index: usize },

    #[error("{0} is not finite")]
    NonFiniteValue(&'static str),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: (usize, usize), right: (usize, usize) },

    #[error("step {step} is outside the schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("non-finite loss at epoch {epoch}, step {step} (lr {lr:e}, last finite loss {last_loss:e})")]
    NonFiniteLoss { epoch: usize, step: usize, lr: f64, last_loss: f64 },

    #[error("toy summary needs 2-D embeddings, got d = {dim}")]
    NotToyShape { dim: usize },

    #[error("class {class} has {count} samples, at least 2 are required")]
    InsufficientSamples { class: usize, count: usize },

    #[error("invalid dataset spec: {0}")]
    InvalidDataSpec(String),

    #[error("score list is empty: {0}")]
    EmptyScores(&'static str),

    #[error("FAR {0} is outside (0, 1]")]
    FarOutOfRange(f64),

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("probe label {0} has no gallery entry")]
    MissingLabel(usize),

    #[error("malformed accuracy table: {0}")]
    MalformedTable(String),

    #[error("bad grid: {0}")]
    BadGrid(String),

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("unknown subcommand: {0}")]
    UnknownSubcommand(String),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

impl Error {
    /// Short machine-readable kind, used on the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ZeroVector { .. } => "ZeroVector",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::SplitMismatch { .. } => "SplitMismatch",
            Error::DegenerateCenter { .. } => "DegenerateCenter",
            Error::InvalidMarginConfig(_) => "InvalidMarginConfig",
            Error::NonFiniteObjective { .. } => "NonFiniteObjective",
            Error::NonFiniteValue(_) => "NonFiniteValue",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::StepOutOfRange { .. } => "StepOutOfRange",
            Error::InvalidSchedule(_) => "InvalidSchedule",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::NotToyShape { .. } => "NotToyShape",
            Error::InsufficientSamples { .. } => "InsufficientSamples",
            Error::InvalidDataSpec(_) => "InvalidDataSpec",
            Error::EmptyScores(_) => "EmptyScores",
            Error::FarOutOfRange(_) => "FarOutOfRange",
            Error::EmptyGallery => "EmptyGallery",
            Error::MissingLabel(_) => "MissingLabel",
            Error::MalformedTable(_) => "MalformedTable",
            Error::BadGrid(_) => "BadGrid",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::UnknownSubcommand(_) => "UnknownSubcommand",
            Error::Io { .. } => "Io",
            Error::Format { .. } => "Format",
        }
    }
}
