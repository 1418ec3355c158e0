//! Evaluation harness: leave-one-out cross-validation per modality and task,
//! confusion-matrix metrics, and comparison tables.

pub mod dataset;
mod error;
pub mod loocv;
pub mod metrics;
pub mod report;

pub use dataset::{build_dataset, build_patient_cube, CubeCache, LabeledCube, MixingSettings};
pub use error::{EvalError, Result};
pub use loocv::{run_loocv, FoldAudit, LoocvConfig, LoocvOutcome};
pub use metrics::{compute_counts, compute_metrics, FoldResult, MetricsReport, ReportContext};
pub use report::{
    compare_modalities, read_report, write_report, ComparisonRow, ComparisonTable, Modality,
    ReportFile,
};
