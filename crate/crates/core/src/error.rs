use std::path::PathBuf;

/// Errors raised anywhere in the lab.
///
/// The split between configuration-class and runtime-class errors drives the
/// CLI exit code (2 and 1 respectively), see [`Error::is_config`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing field `{0}`")]
    MissingField(String),

    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dimension(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            got,
        }
    }

    /// True for errors caused by bad input files, configs or missing artifacts.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::MissingField(_)
                | Error::Validation { .. }
                | Error::UnknownKey(_)
                | Error::Parse { .. }
                | Error::Version { .. }
                | Error::Mismatch(_)
                | Error::MissingArtifact(_)
                | Error::Json(_)
        )
    }

    /// Short machine-parsable class name.
    pub fn class(&self) -> &'static str {
        match self {
            Error::MissingField(_) => "missing_field",
            Error::Validation { .. } => "validation",
            Error::UnknownKey(_) => "unknown_key",
            Error::Dimension { .. } => "dimension",
            Error::NonFinite(_) => "non_finite",
            Error::Parse { .. } => "parse",
            Error::Version { .. } => "version",
            Error::Mismatch(_) => "mismatch",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::Diverged(_) => "diverged",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
