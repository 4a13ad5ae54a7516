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

    #[error("{path}: {reason}")]
    Nifti { path: PathBuf, reason: String },

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimsMismatch { left: [usize; 3], right: [usize; 3] },

    #[error("invalid preprocessing spec: {0}")]
    InvalidSpec(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("backend exited with {}; see {}", exit_code_str(*.code), .log.display())]
    BackendExit { code: Option<i32>, log: PathBuf },

    #[error("backend timed out after {seconds}s; see {}", .log.display())]
    BackendTimeout { seconds: f64, log: PathBuf },

    #[error("backend output error: {0}")]
    BackendOutput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid phantom spec: {0}")]
    Phantom(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

fn exit_code_str(code: Option<i32>) -> String {
    match code {
        Some(c) => format!("exit code {c}"),
        None => "no exit code (killed by signal)".to_string(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn nifti(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Nifti {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
