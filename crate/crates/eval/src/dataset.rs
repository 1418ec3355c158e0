//! Builds per-patient data cubes for a modality, with optional disk caching.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use cdis_core::{
    adc, compute_cdis, cube, load_dwi_study, stack_channels, standardize_cube_to, CohortManifest,
    DataCube, MixingConfig, PatientRecord, Task,
};

use crate::error::{EvalError, Result};
use crate::report::Modality;

/// Mixing parameters with data-derived defaults left open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingSettings {
    /// None: use every b-value the study provides.
    pub native_bvalues: Option<Vec<f64>>,
    pub synthetic_bvalues: Vec<f64>,
    /// None: uniform weights over the union.
    pub coefficients: Option<Vec<(f64, f64)>>,
    /// None: derive from the study (1e-6 of the pooled p99 intensity).
    pub epsilon: Option<f64>,
}

impl Default for MixingSettings {
    fn default() -> Self {
        MixingSettings {
            native_bvalues: None,
            synthetic_bvalues: vec![1000.0, 1500.0, 2000.0],
            coefficients: None,
            epsilon: None,
        }
    }
}

impl MixingSettings {
    /// Resolves against a concrete study.
    pub fn resolve(&self, study: &cdis_core::DwiStudy) -> MixingConfig {
        let native = self
            .native_bvalues
            .clone()
            .unwrap_or_else(|| study.bvalues().to_vec());
        let epsilon = self.epsilon.unwrap_or_else(|| adc::default_epsilon(study));
        match &self.coefficients {
            Some(coeffs) => MixingConfig {
                native_bvalues: native,
                synthetic_bvalues: self.synthetic_bvalues.clone(),
                coefficients: coeffs.clone(),
                epsilon,
            },
            None => MixingConfig::uniform(&native, &self.synthetic_bvalues, epsilon),
        }
    }
}

/// Disk cache for standardized cubes (and the place synthesized volumes
/// land); entries are reused only when their embedded fingerprint matches.
#[derive(Debug, Clone)]
pub struct CubeCache {
    pub cache_dir: PathBuf,
    /// Where `synth` wrote per-patient volumes, if anywhere.
    pub cdis_volume_dir: Option<PathBuf>,
    pub fingerprint: String,
    pub tool_version: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheMeta {
    fingerprint: String,
    tool_version: String,
    patient_id: String,
    kind: String,
}

impl CubeCache {
    fn cube_path(&self, modality_key: &str, patient_id: &str) -> PathBuf {
        self.cache_dir
            .join("cubes")
            .join(modality_key)
            .join(format!("{patient_id}.cube"))
    }

    fn meta_for(&self, patient_id: &str, kind: &str) -> String {
        serde_json::to_string(&CacheMeta {
            fingerprint: self.fingerprint.clone(),
            tool_version: self.tool_version.clone(),
            patient_id: patient_id.to_string(),
            kind: kind.to_string(),
        })
        .expect("meta serializes")
    }

    fn matches(&self, meta: &str) -> bool {
        serde_json::from_str::<CacheMeta>(meta)
            .map(|m| m.fingerprint == self.fingerprint)
            .unwrap_or(false)
    }

    fn load_cube(&self, modality_key: &str, patient_id: &str) -> Option<DataCube> {
        let path = self.cube_path(modality_key, patient_id);
        let (cube, meta) = cube::read_cube(&path).ok()?;
        self.matches(&meta).then_some(cube)
    }

    fn store_cube(&self, modality_key: &str, patient_id: &str, data: &DataCube) -> Result<()> {
        let path = self.cube_path(modality_key, patient_id);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| EvalError::io(parent, e))?;
        }
        cube::write_cube(&path, data, &self.meta_for(patient_id, "cube"))?;
        Ok(())
    }

    /// The synthesized volume for a patient when present and current.
    fn load_cdis_volume(&self, patient_id: &str) -> Option<cdis_core::Volume3D> {
        let dir = self.cdis_volume_dir.as_ref()?;
        let path = dir.join(format!("{patient_id}.vol"));
        let (vol, meta) = cdis_core::volume::read_volume(&path).ok()?;
        self.matches(&meta).then_some(vol)
    }
}

/// A labeled training/evaluation example.
#[derive(Debug, Clone)]
pub struct LabeledCube {
    pub patient_id: String,
    pub label: bool,
    pub cube: DataCube,
}

fn patient_err(patient_id: &str) -> impl Fn(cdis_core::CoreError) -> EvalError + '_ {
    move |source| EvalError::PatientData {
        patient_id: patient_id.to_string(),
        source,
    }
}

/// Loads the patient's DWI study from the manifest.
pub fn load_patient_study(
    manifest: &CohortManifest,
    record: &PatientRecord,
) -> Result<cdis_core::DwiStudy> {
    let files = record.dwi_files();
    if files.is_empty() {
        return Err(EvalError::MissingModality {
            patient_id: record.patient_id.clone(),
            modality: "dwi".into(),
        });
    }
    let paths: Vec<PathBuf> = files.iter().map(|(_, p)| manifest.resolve(p)).collect();
    let bvalues: Vec<f64> = files.iter().map(|(b, _)| *b).collect();
    load_dwi_study(&paths, &bvalues).map_err(patient_err(&record.patient_id))
}

/// Synthesizes (or reloads) the patient's mixed-signal volume.
pub fn patient_cdis_volume(
    manifest: &CohortManifest,
    record: &PatientRecord,
    mixing: &MixingSettings,
    cache: Option<&CubeCache>,
) -> Result<cdis_core::Volume3D> {
    if let Some(c) = cache {
        if let Some(vol) = c.load_cdis_volume(&record.patient_id) {
            return Ok(vol);
        }
    }
    let study = load_patient_study(manifest, record)?;
    let config = mixing.resolve(&study);
    compute_cdis(&study, &config).map_err(patient_err(&record.patient_id))
}

/// Builds one patient's standardized cube for a modality.
pub fn build_patient_cube(
    manifest: &CohortManifest,
    record: &PatientRecord,
    modality: &Modality,
    mixing: &MixingSettings,
    cube_dims: (usize, usize, usize),
    cache: Option<&CubeCache>,
) -> Result<DataCube> {
    let pid = record.patient_id.clone();
    if let Some(c) = cache {
        if let Some(cube) = c.load_cube(&modality.key(), &pid) {
            if cube.dims() == cube_dims {
                return Ok(cube);
            }
        }
    }

    let single = |name: &str| -> Result<cdis_core::Volume3D> {
        let path = record.single_path(name).ok_or_else(|| EvalError::MissingModality {
            patient_id: pid.clone(),
            modality: name.to_string(),
        })?;
        let (vol, _) = cdis_core::volume::read_volume(manifest.resolve(path))
            .map_err(patient_err(&pid))?;
        Ok(vol)
    };

    let cube = match modality {
        Modality::Adc => standardize_cube_to(&single(cdis_core::cohort::MODALITY_ADC)?, cube_dims),
        Modality::T2w => standardize_cube_to(&single(cdis_core::cohort::MODALITY_T2W)?, cube_dims),
        Modality::Cdis => {
            let vol = patient_cdis_volume(manifest, record, mixing, cache)?;
            standardize_cube_to(&vol, cube_dims)
        }
        Modality::DwiSingle(b) => {
            let study = load_patient_study(manifest, record)?;
            let vol = study.volume_for(*b).ok_or_else(|| EvalError::MissingModality {
                patient_id: pid.clone(),
                modality: format!("dwi-b{}", cdis_core::cohort::format_bvalue(*b)),
            })?;
            standardize_cube_to(vol, cube_dims)
        }
        Modality::DwiStacked => {
            let study = load_patient_study(manifest, record)?;
            let cubes: Vec<DataCube> = study
                .volumes()
                .iter()
                .map(|v| standardize_cube_to(v, cube_dims))
                .collect();
            stack_channels(&cubes).map_err(patient_err(&pid))?
        }
    };

    if let Some(c) = cache {
        c.store_cube(&modality.key(), &pid, &cube)?;
    }
    Ok(cube)
}

/// Builds the dataset for every record in the (already validated) manifest.
pub fn build_dataset(
    manifest: &CohortManifest,
    task: Task,
    modality: &Modality,
    mixing: &MixingSettings,
    cube_dims: (usize, usize, usize),
    cache: Option<&CubeCache>,
) -> Result<Vec<LabeledCube>> {
    let results: Vec<Result<LabeledCube>> =
        cdis_core::par::map_indexed(manifest.records.len(), |i| {
            let record = &manifest.records[i];
            let label = record
                .binary_label(task)
                .map_err(patient_err(&record.patient_id))?;
            let cube = build_patient_cube(manifest, record, modality, mixing, cube_dims, cache)?;
            Ok(LabeledCube {
                patient_id: record.patient_id.clone(),
                label,
                cube,
            })
        });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use cdis_core::{generate_phantom_cohort, PhantomSpec};

    fn tiny_cohort(dir: &std::path::Path) -> CohortManifest {
        let spec = PhantomSpec {
            n_patients: 3,
            grid: (12, 12, 5),
            seed: 4,
            ..Default::default()
        };
        let (manifest, _) = generate_phantom_cohort(&spec, dir).unwrap();
        manifest
    }

    #[test]
    fn all_modalities_build_cubes() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_cohort(dir.path());
        let mixing = MixingSettings::default();
        for m in [
            Modality::Cdis,
            Modality::Adc,
            Modality::T2w,
            Modality::DwiStacked,
            Modality::DwiSingle(800.0),
        ] {
            let data =
                build_dataset(&manifest, Task::Grading, &m, &mixing, (8, 8, 5), None).unwrap();
            assert_eq!(data.len(), 3);
            let want_channels = if matches!(m, Modality::DwiStacked) { 4 } else { 1 };
            for lc in &data {
                assert_eq!(lc.cube.channels(), want_channels);
                assert_eq!(lc.cube.dims(), (8, 8, 5));
            }
        }
    }

    #[test]
    fn missing_bvalue_is_reported_with_patient() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_cohort(dir.path());
        let err = build_dataset(
            &manifest,
            Task::Grading,
            &Modality::DwiSingle(123.0),
            &MixingSettings::default(),
            (8, 8, 5),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, EvalError::MissingModality { .. }), "{err}");
    }

    #[test]
    fn cache_hits_reproduce_identical_cubes() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_cohort(dir.path());
        let cache = CubeCache {
            cache_dir: dir.path().join("cache"),
            cdis_volume_dir: None,
            fingerprint: "abc".into(),
            tool_version: "v".into(),
        };
        let mixing = MixingSettings::default();
        let fresh = build_dataset(
            &manifest,
            Task::Pcr,
            &Modality::Cdis,
            &mixing,
            (8, 8, 5),
            Some(&cache),
        )
        .unwrap();
        assert!(cache.cube_path("cdis", "p000").is_file());
        let cached = build_dataset(
            &manifest,
            Task::Pcr,
            &Modality::Cdis,
            &mixing,
            (8, 8, 5),
            Some(&cache),
        )
        .unwrap();
        for (a, b) in fresh.iter().zip(&cached) {
            assert_eq!(a.cube, b.cube);
            assert_eq!(a.label, b.label);
        }

        // A different fingerprint ignores the stale entries.
        let cache2 = CubeCache {
            fingerprint: "other".into(),
            ..cache.clone()
        };
        let rebuilt = build_dataset(
            &manifest,
            Task::Pcr,
            &Modality::Cdis,
            &mixing,
            (8, 8, 5),
            Some(&cache2),
        )
        .unwrap();
        for (a, b) in fresh.iter().zip(&rebuilt) {
            assert_eq!(a.cube, b.cube);
        }
    }
}
