use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: not a cdis volume file (bad magic)")]
    BadMagic { path: PathBuf },

    #[error("{path}: unsupported dtype tag {dtype}")]
    UnsupportedDtype { path: PathBuf, dtype: u16 },

    #[error("{path}: truncated volume file")]
    Truncated { path: PathBuf },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("manifest {path}: no records")]
    EmptyManifest { path: PathBuf },

    #[error("manifest row {row}: {msg}")]
    ManifestRow { row: usize, msg: String },

    #[error("patient {patient_id}: duplicate {what}")]
    DuplicateEntry { patient_id: String, what: String },

    #[error("patient {patient_id}: conflicting {field} labels ({a} vs {b})")]
    LabelConflict {
        patient_id: String,
        field: &'static str,
        a: String,
        b: String,
    },

    #[error("grade is absent; cannot binarize")]
    AbsentGrade,

    #[error("volume grid mismatch: dims {expected_dims:?} vs {found_dims:?}, spacing {expected_spacing:?} vs {found_spacing:?}")]
    GridMismatch {
        expected_dims: (usize, usize, usize),
        found_dims: (usize, usize, usize),
        expected_spacing: (f64, f64, f64),
        found_spacing: (f64, f64, f64),
    },

    #[error("expected {expected} b-values for {found} paths")]
    BValueCountMismatch { expected: usize, found: usize },

    #[error("duplicate b-value {b}")]
    DuplicateBValue { b: f64 },

    #[error("negative b-value {b}")]
    NegativeBValue { b: f64 },

    #[error("need at least {needed} distinct b-values, study has {got}")]
    TooFewBValues { needed: usize, got: usize },

    #[error("invalid mixing config: {0}")]
    InvalidMixing(String),

    #[error("mixing coefficient missing for b={b}")]
    MissingCoefficient { b: f64 },

    #[error("native b-value {b} absent from study")]
    NativeBValueMissing { b: f64 },

    #[error("cannot stack an empty cube list")]
    EmptyStack,

    #[error("cube dim mismatch: {expected:?} vs {found:?}")]
    CubeDimMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },

    #[error("expected a single-channel cube, got {got} channels")]
    MultiChannelStackInput { got: usize },

    #[error("invalid phantom spec: {0}")]
    InvalidPhantomSpec(String),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}
