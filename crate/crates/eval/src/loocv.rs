//! Leave-one-out cross-validation.
//!
//! Fold `i` trains a freshly initialized model on every patient except `i`
//! (fold seed = global seed XOR fold index) and predicts the held-out
//! patient. Folds run in parallel; aggregation is index-ordered counting, so
//! outcomes are independent of execution order. Each fold's audit carries
//! the training id list and a checksum of the trained weights for leakage
//! probes.

use cdis_core::{validate_cohort, CohortManifest, ExclusionReport};
use cdis_net::{
    build_predictor, model_checksum, train, Extractor, NetworkConfig, TrainConfig,
};

use crate::dataset::{build_dataset, CubeCache, LabeledCube, MixingSettings};
use crate::error::{EvalError, Result};
use crate::metrics::{compute_metrics, FoldResult, MetricsReport, ReportContext};
use crate::report::Modality;

#[derive(Debug, Clone)]
pub struct LoocvConfig {
    pub modality: Modality,
    pub net: NetworkConfig,
    pub train: TrainConfig,
    /// Global seed; fold seeds derive from it.
    pub seed: u64,
    /// Decision threshold (boundary inclusive), normally 0.5.
    pub threshold: f64,
    pub cube_dims: (usize, usize, usize),
    pub mixing: MixingSettings,
    pub fingerprint: String,
    pub tool_version: String,
}

/// Structural record of one fold for leakage checks.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldAudit {
    pub fold_index: usize,
    pub held_out: String,
    pub train_ids: Vec<String>,
    /// Digest of the fold's trained parameters.
    pub model_checksum: String,
}

#[derive(Debug, Clone)]
pub struct LoocvOutcome {
    pub folds: Vec<FoldResult>,
    pub audits: Vec<FoldAudit>,
    pub report: MetricsReport,
    pub exclusions: ExclusionReport,
    /// The cohort's native b-values (for display labels).
    pub native_bvalues: Vec<f64>,
}

/// Runs LOOCV over the manifest's retained records.
pub fn run_loocv(
    manifest: &CohortManifest,
    cfg: &LoocvConfig,
    cache: Option<&CubeCache>,
) -> Result<LoocvOutcome> {
    let (retained, exclusions) = validate_cohort(manifest);
    if retained.len() < 2 {
        return Err(EvalError::CohortTooSmall(retained.len()));
    }

    let dataset = build_dataset(
        &retained,
        retained.task,
        &cfg.modality,
        &cfg.mixing,
        cfg.cube_dims,
        cache,
    )?;

    let n = dataset.len();
    let n_pos = dataset.iter().filter(|s| s.label).count();
    if n_pos == 0 || n_pos == n {
        return Err(EvalError::SingleClass);
    }

    let channels = dataset[0].cube.channels();
    if dataset.iter().any(|s| s.cube.channels() != channels) {
        return Err(EvalError::Net(cdis_net::NetError::ChannelMismatch {
            expected: channels,
            got: dataset
                .iter()
                .find(|s| s.cube.channels() != channels)
                .map(|s| s.cube.channels())
                .unwrap_or(0),
        }));
    }
    let mut net_cfg = cfg.net.clone();
    net_cfg.in_channels = channels;

    let results: Vec<Result<(FoldResult, FoldAudit)>> = cdis_core::par::map_indexed(n, |i| {
        run_fold(i, &dataset, &net_cfg, cfg)
    });

    let mut folds = Vec::with_capacity(n);
    let mut audits = Vec::with_capacity(n);
    for r in results {
        let (fold, audit) = r?;
        folds.push(fold);
        audits.push(audit);
    }

    let native_bvalues: Vec<f64> = retained
        .records
        .first()
        .map(|r| r.dwi_files().iter().map(|(b, _)| *b).collect())
        .unwrap_or_default();
    let ctx = ReportContext {
        task: retained.task,
        modality: cfg.modality.key(),
        modality_label: cfg.modality.label(&native_bvalues),
        fingerprint: cfg.fingerprint.clone(),
        tool_version: cfg.tool_version.clone(),
    };
    let report = compute_metrics(&folds, &ctx)?;

    Ok(LoocvOutcome {
        folds,
        audits,
        report,
        exclusions,
        native_bvalues,
    })
}

fn run_fold(
    i: usize,
    dataset: &[LabeledCube],
    net_cfg: &NetworkConfig,
    cfg: &LoocvConfig,
) -> Result<(FoldResult, FoldAudit)> {
    let fold_seed = cfg.seed ^ (i as u64);
    let mut fold_net = net_cfg.clone();
    fold_net.seed = fold_seed;
    let mut fold_train = cfg.train.clone();
    fold_train.seed = fold_seed;

    let mut extractor = Extractor::new(fold_net.clone())?;
    let mut predictor = build_predictor(fold_net.feature_dim, fold_seed);

    let train_set: Vec<(&cdis_core::DataCube, bool)> = dataset
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, s)| (&s.cube, s.label))
        .collect();
    let train_ids: Vec<String> = dataset
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, s)| s.patient_id.clone())
        .collect();

    train(&mut extractor, &mut predictor, &train_set, &fold_train)?;

    let held = &dataset[i];
    let features = cdis_net::extract_features(&extractor, &held.cube)?;
    let (predicted, probability) = predictor.predict(&features, cfg.threshold);

    Ok((
        FoldResult {
            patient_id: held.patient_id.clone(),
            true_label: held.label,
            predicted_label: predicted,
            probability,
        },
        FoldAudit {
            fold_index: i,
            held_out: held.patient_id.clone(),
            train_ids,
            model_checksum: model_checksum(&extractor, &predictor),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cdis_core::{generate_phantom_cohort, PhantomSpec, Task};

    fn quick_config(fingerprint: &str) -> LoocvConfig {
        LoocvConfig {
            modality: Modality::Cdis,
            net: NetworkConfig::miniature(1, 0),
            train: TrainConfig {
                epochs: 2,
                batch_size: 4,
                learning_rate: 0.01,
                ..Default::default()
            },
            seed: 7,
            threshold: 0.5,
            cube_dims: (8, 8, 5),
            mixing: MixingSettings::default(),
            fingerprint: fingerprint.into(),
            tool_version: "test".into(),
        }
    }

    fn cohort(dir: &std::path::Path, n: usize, task: Task, seed: u64) -> CohortManifest {
        let spec = PhantomSpec {
            n_patients: n,
            grid: (12, 12, 5),
            seed,
            ..Default::default()
        };
        let (mut manifest, _) = generate_phantom_cohort(&spec, dir).unwrap();
        manifest.task = task;
        manifest
    }

    #[test]
    fn fold_count_and_completeness() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = cohort(dir.path(), 5, Task::Grading, 1);
        let outcome = run_loocv(&manifest, &quick_config("fp"), None).unwrap();
        assert_eq!(outcome.folds.len(), 5);
        let mut seen: Vec<&str> = outcome.folds.iter().map(|f| f.patient_id.as_str()).collect();
        seen.sort();
        assert_eq!(seen, ["p000", "p001", "p002", "p003", "p004"]);
        assert_eq!(outcome.report.total(), 5);
    }

    #[test]
    fn training_sets_never_contain_the_held_out_id() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = cohort(dir.path(), 4, Task::Pcr, 2);
        let outcome = run_loocv(&manifest, &quick_config("fp"), None).unwrap();
        for audit in &outcome.audits {
            assert_eq!(audit.train_ids.len(), 3);
            assert!(!audit.train_ids.contains(&audit.held_out));
        }
    }

    #[test]
    fn cohort_of_one_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = cohort(dir.path(), 1, Task::Grading, 3);
        assert!(matches!(
            run_loocv(&manifest, &quick_config("fp"), None),
            Err(EvalError::CohortTooSmall(1))
        ));
    }

    #[test]
    fn single_class_cohort_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = cohort(dir.path(), 4, Task::Grading, 4);
        for r in &mut manifest.records {
            r.sbr_grade = Some(cdis_core::SbrGrade::III);
        }
        assert!(matches!(
            run_loocv(&manifest, &quick_config("fp"), None),
            Err(EvalError::SingleClass)
        ));
    }

    #[test]
    fn identical_seeds_reproduce_identical_outcomes() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = cohort(dir.path(), 4, Task::Grading, 5);
        let a = run_loocv(&manifest, &quick_config("fp"), None).unwrap();
        let b = run_loocv(&manifest, &quick_config("fp"), None).unwrap();
        assert_eq!(a.folds, b.folds);
        assert_eq!(a.audits, b.audits);
        assert_eq!(a.report, b.report);
    }

    #[test]
    fn flipping_the_held_out_label_leaves_that_fold_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = cohort(dir.path(), 4, Task::Grading, 6);
        let base = run_loocv(&manifest, &quick_config("fp"), None).unwrap();

        // Flip patient 2's grade; only folds training on it may change.
        let mut flipped = manifest.clone();
        let flip_idx = 2;
        let old = flipped.records[flip_idx].sbr_grade.unwrap();
        flipped.records[flip_idx].sbr_grade = Some(match old {
            cdis_core::SbrGrade::III => cdis_core::SbrGrade::II,
            _ => cdis_core::SbrGrade::III,
        });
        let changed = run_loocv(&flipped, &quick_config("fp"), None).unwrap();

        assert_eq!(
            base.audits[flip_idx].model_checksum,
            changed.audits[flip_idx].model_checksum,
            "held-out label leaked into fold training"
        );
        // The other folds saw different training labels.
        assert_ne!(
            base.audits[(flip_idx + 1) % 4].model_checksum,
            changed.audits[(flip_idx + 1) % 4].model_checksum
        );
    }
}
