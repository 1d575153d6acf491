use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration at `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid candidate transition for candidate {id}: {from:?} -> {to:?}")]
    InvalidTransition {
        id: u64,
        from: crate::datamodel::CandidateState,
        to: crate::datamodel::CandidateState,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("unsupported format_version {found} (expected {expected})")]
    FormatVersion { found: u64, expected: u64 },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse classification used by front ends to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Internal,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig { .. } | Error::UnknownKey(_) => ErrorKind::Config,
            Error::Invariant(_) | Error::InvalidTransition { .. } => ErrorKind::Internal,
            Error::Context { source, .. } => source.kind(),
            Error::DimensionMismatch { .. }
            | Error::LabelOutOfRange { .. }
            | Error::InsufficientData(_)
            | Error::FormatVersion { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => ErrorKind::Data,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
