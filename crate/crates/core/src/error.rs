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

    #[error("{path}, row {row}: {message}")]
    MalformedRow { path: PathBuf, row: usize, message: String },

    #[error("duplicate record for cell {cell_id}, month {month_index} (rows {first_row} and {second_row})")]
    DuplicateRecord {
        cell_id: i64,
        month_index: i64,
        first_row: usize,
        second_row: usize,
    },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("record references unknown cell {0}")]
    UnknownCell(i64),

    #[error("covariance matrix is singular even with jitter {jitter:e}")]
    Singular { jitter: f64 },

    #[error("optimizer failed to converge from any of {starts} starts: {diagnostics}")]
    NonConvergence { starts: usize, diagnostics: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("feature surfaces do not match; missing keys: {0}")]
    SurfaceMismatch(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("missing artifact {path}; run stage `{stage}` first")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("selection round {round}: {source}")]
    SelectionRound {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical routines (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Singular { .. } | Error::NonConvergence { .. } => true,
            Error::SelectionRound { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
