//! Core imaging pipeline for correlated-diffusion workflows.
//!
//! Provides the shared containers (volumes, cohort manifests, data cubes),
//! the per-voxel monoexponential diffusion fit, synthetic signal
//! extrapolation and mixing, cube standardization, and a synthetic phantom
//! generator with known ground truth for end-to-end testing.
//!
//! Heavy per-voxel loops run on rayon when the `parallel` feature is enabled
//! (the default) and fall back to plain sequential iteration otherwise; see
//! [`par`]. All operations are deterministic regardless of the mode.

pub mod adc;
pub mod cohort;
pub mod cube;
mod error;
pub mod mixing;
pub mod par;
pub mod phantom;
pub mod volume;

pub use adc::{fit_adc, fit_adc_with_epsilon, synthesize_signal, AdcFit};
pub use cohort::{
    binarize_grade, load_dwi_study, load_manifest, validate_cohort, write_manifest,
    CohortManifest, DwiStudy, ExclusionReport, PatientRecord, SbrGrade, Task,
};
pub use cube::{stack_channels, standardize_cube, standardize_cube_to, ChannelNorm, DataCube};
pub use error::{CoreError, Result};
pub use mixing::{compute_cdis, MixingConfig};
pub use phantom::{generate_phantom_cohort, GroundTruth, PatientTruth, PhantomSpec};
pub use volume::Volume3D;
