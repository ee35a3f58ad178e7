use std::path::PathBuf;

use crate::corpus::Label;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("duplicate recording id `{0}`")]
    DuplicateRecording(String),

    #[error("session `{session}` mixes patients `{first}` and `{second}`")]
    SessionPatientMismatch {
        session: String,
        first: String,
        second: String,
    },

    #[error("session `{session}` mixes labels")]
    SessionLabelMismatch { session: String },

    #[error("no samples of class {0:?}")]
    MissingClass(Label),

    #[error("corpus has a single patient; a patient-disjoint split is impossible")]
    SinglePatient,

    #[error("recording `{recording}` is missing window index {index}")]
    WindowGap { recording: String, index: usize },

    #[error("recording `{recording}` window {index}: {reason}")]
    BadWindow {
        recording: String,
        index: usize,
        reason: String,
    },

    #[error("recording has {count} windows but the encoding allows at most {max}")]
    TooManyWindows { count: usize, max: usize },

    #[error("input length {got} does not match the expected {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("feature vectors are required by this encoding but absent")]
    MissingFeatures,

    #[error("non-finite loss at epoch {epoch}: {loss}")]
    NonFinite { epoch: usize, loss: f64 },

    #[error("{0}")]
    Unsupported(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config file: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
