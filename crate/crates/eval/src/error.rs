use thiserror::Error;

use cdis_core::CoreError;
use cdis_net::NetError;

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("manifest task {got} does not match requested task {expected}")]
    TaskMismatch { expected: String, got: String },

    #[error("cohort of {0} patient(s); leave-one-out needs at least 2")]
    CohortTooSmall(usize),

    #[error("cohort holds a single class; both classes are required")]
    SingleClass,

    #[error("no fold results to aggregate")]
    EmptyResults,

    #[error("reports mix tasks; a comparison covers one task")]
    MixedTasks,

    #[error("patient {patient_id}: no {modality} entry in manifest")]
    MissingModality {
        patient_id: String,
        modality: String,
    },

    #[error("patient {patient_id}: {source}")]
    PatientData {
        patient_id: String,
        #[source]
        source: CoreError,
    },

    #[error("unknown modality {0:?} (expected cdis|adc|t2w|dwi-stacked|dwi-b<value>)")]
    UnknownModality(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Net(#[from] NetError),

    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("report file {path}: {msg}")]
    BadReport {
        path: std::path::PathBuf,
        msg: String,
    },
}

impl EvalError {
    pub fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        EvalError::Io {
            path: path.into(),
            source,
        }
    }
}
