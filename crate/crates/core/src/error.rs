use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("horizon mismatch: expected t_obs={expected_obs} t_pred={expected_pred}, got t_obs={obs} t_pred={pred}")]
    HorizonMismatch {
        expected_obs: usize,
        expected_pred: usize,
        obs: usize,
        pred: usize,
    },

    #[error("duplicate scene id `{0}`")]
    DuplicateId(String),

    #[error("invalid scene `{id}`: {msg}")]
    InvalidScene { id: String, msg: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("budget violation: {0}")]
    Budget(String),

    #[error("membership violation: {0}")]
    Membership(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
