use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },

    #[error("duplicate image_id `{0}`")]
    DuplicateId(String),

    #[error("image `{image_id}`: confidence {value} outside (0, 1)")]
    ConfidenceOutOfRange { image_id: String, value: f64 },

    #[error("image `{image_id}`: missing stage `{stage}`")]
    MissingStage { image_id: String, stage: String },

    #[error("invalid window ({lower}, {upper}): need 0 <= lower <= upper < 1")]
    InvalidWindow { lower: f64, upper: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown metric `{0}` (expected mcc, accuracy, abstention_fraction or false_alarm_fraction)")]
    UnknownMetric(String),

    #[error("cloud candidate is not conditioned on this phone candidate's abstained set")]
    NotConditioned,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("infeasible targets: {0}")]
    Infeasible(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
