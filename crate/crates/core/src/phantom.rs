//! Synthetic cohorts with known ground truth.
//!
//! Each patient is an ellipsoidal tissue body containing one axis-aligned
//! ellipsoidal lesion whose mean diffusion coefficient depends on the class
//! label. Signals follow `S(b) = S0 * exp(-b * ADC)` with additive Gaussian
//! noise scaled by the local signal magnitude (sigma = noise_sigma * S),
//! clamped at zero. Every patient carries both an SBR grade and a pCR label,
//! so one cohort serves either task.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cohort::{
    write_manifest, CohortManifest, ModalityFile, PatientRecord, SbrGrade, Task, MODALITY_ADC,
    MODALITY_DWI, MODALITY_T2W,
};
use crate::error::{CoreError, Result};
use crate::par;
use crate::volume::{write_volume, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub n_patients: usize,
    pub grid: (usize, usize, usize),
    pub native_bvalues: Vec<f64>,
    /// Difference in lesion mean ADC between classes (mm^2/s); the positive
    /// class sits this far below `lesion_adc_negative`.
    pub class_separation: f64,
    /// Noise sigma as a fraction of the local signal magnitude.
    pub noise_sigma: f64,
    pub seed: u64,
    pub tissue_s0: f64,
    pub lesion_s0: f64,
    pub tissue_adc: f64,
    /// Lesion mean ADC of the negative class.
    pub lesion_adc_negative: f64,
    /// Per-patient Gaussian jitter on the lesion ADC.
    pub lesion_adc_jitter: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            n_patients: 20,
            grid: (24, 24, 7),
            native_bvalues: vec![0.0, 100.0, 600.0, 800.0],
            class_separation: 1.2e-3,
            noise_sigma: 0.02,
            seed: 0,
            tissue_s0: 100.0,
            lesion_s0: 100.0,
            tissue_adc: 2.5e-3,
            lesion_adc_negative: 2.0e-3,
            lesion_adc_jitter: 5e-5,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (nx, ny, nz) = self.grid;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(CoreError::InvalidPhantomSpec(format!(
                "grid dims must be >= 1, got {:?}",
                self.grid
            )));
        }
        if self.native_bvalues.is_empty() {
            return Err(CoreError::InvalidPhantomSpec("no native b-values".into()));
        }
        for v in [
            self.class_separation,
            self.noise_sigma,
            self.tissue_s0,
            self.lesion_s0,
            self.tissue_adc,
            self.lesion_adc_negative,
            self.lesion_adc_jitter,
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CoreError::InvalidPhantomSpec(format!(
                    "negative or non-finite parameter {v}"
                )));
            }
        }
        Ok(())
    }

    fn lesion_adc_mean(&self, positive: bool) -> f64 {
        if positive {
            (self.lesion_adc_negative - self.class_separation).max(0.0)
        } else {
            self.lesion_adc_negative
        }
    }
}

/// Planted parameters for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    pub positive: bool,
    pub sbr_grade: SbrGrade,
    pub pcr: bool,
    pub lesion_center: [f64; 3],
    pub lesion_radii: [f64; 3],
    pub lesion_adc: f64,
    pub tissue_adc: f64,
    /// Relative path of the exported baseline-signal map (the t2w modality).
    pub s0_map: String,
    /// Relative path of the exported planted ADC map (the adc modality).
    pub adc_map: String,
}

impl PatientTruth {
    /// True when the voxel lies inside the planted lesion.
    pub fn in_lesion(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x as f64, y as f64, z as f64];
        let mut q = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.lesion_center[a]) / self.lesion_radii[a];
            q += d * d;
        }
        q <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub patients: Vec<PatientTruth>,
}

/// One patient's maps and noisy acquisitions, before any file I/O.
pub struct PatientVolumes {
    pub truth: PatientTruth,
    pub s0_map: Volume3D,
    pub adc_map: Volume3D,
    pub dwi: Vec<(f64, Volume3D)>,
}

/// Generates one patient deterministically from its sub-seed.
pub fn generate_patient(
    spec: &PhantomSpec,
    index: usize,
    sub_seed: u64,
    positive: bool,
) -> PatientVolumes {
    let mut rng = ChaCha12Rng::seed_from_u64(sub_seed);
    let (nx, ny, nz) = spec.grid;
    let dims = [nx as f64, ny as f64, nz as f64];

    let lesion_center: [f64; 3] = std::array::from_fn(|a| dims[a] * rng.random_range(0.35..0.65));
    let lesion_radii: [f64; 3] =
        std::array::from_fn(|a| (dims[a] * rng.random_range(0.12..0.20)).max(0.75));
    let jitter: f64 = rng.sample(StandardNormal);
    let lesion_adc = (spec.lesion_adc_mean(positive) + spec.lesion_adc_jitter * jitter).max(0.0);

    let body_center: [f64; 3] = std::array::from_fn(|a| (dims[a] - 1.0) / 2.0);
    let body_radii: [f64; 3] = std::array::from_fn(|a| (dims[a] * 0.45).max(0.75));

    let patient_id = format!("p{index:03}");
    let truth = PatientTruth {
        patient_id: patient_id.clone(),
        positive,
        sbr_grade: if positive { SbrGrade::III } else { SbrGrade::II },
        pcr: positive,
        lesion_center,
        lesion_radii,
        lesion_adc,
        tissue_adc: spec.tissue_adc,
        s0_map: format!("patients/{patient_id}/t2w.vol"),
        adc_map: format!("patients/{patient_id}/adc.vol"),
    };

    let inside = |p: [f64; 3], c: &[f64; 3], r: &[f64; 3]| {
        let mut q = 0.0;
        for a in 0..3 {
            let d = (p[a] - c[a]) / r[a];
            q += d * d;
        }
        q <= 1.0
    };

    let n = nx * ny * nz;
    let mut s0 = vec![0.0f64; n];
    let mut adc = vec![0.0f64; n];
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64, y as f64, z as f64];
                if inside(p, &body_center, &body_radii) {
                    if inside(p, &lesion_center, &lesion_radii) {
                        s0[i] = spec.lesion_s0;
                        adc[i] = lesion_adc;
                    } else {
                        s0[i] = spec.tissue_s0;
                        adc[i] = spec.tissue_adc;
                    }
                }
                i += 1;
            }
        }
    }

    let spacing = (1.0, 1.0, 1.0);
    let s0_map = Volume3D::new((nx, ny, nz), spacing, s0).expect("phantom s0 map is valid");
    let adc_map = Volume3D::new((nx, ny, nz), spacing, adc).expect("phantom adc map is valid");

    let mut sorted_b = spec.native_bvalues.clone();
    sorted_b.sort_by(f64::total_cmp);
    let dwi = sorted_b
        .iter()
        .map(|&b| {
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let clean = s0_map.data()[i] * (-b * adc_map.data()[i]).exp();
                let v = if spec.noise_sigma > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    (clean * (1.0 + spec.noise_sigma * z)).max(0.0)
                } else {
                    clean
                };
                data.push(v);
            }
            (b, Volume3D::new((nx, ny, nz), spacing, data).expect("phantom dwi is valid"))
        })
        .collect();

    PatientVolumes {
        truth,
        s0_map,
        adc_map,
        dwi,
    }
}

/// Deterministic per-patient labels (alternating, shuffled) and sub-seeds.
pub fn plan_patients(spec: &PhantomSpec) -> (Vec<bool>, Vec<u64>) {
    let mut master = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<bool> = (0..spec.n_patients).map(|i| i % 2 == 0).collect();
    labels.shuffle(&mut master);
    let sub_seeds = (0..spec.n_patients).map(|_| master.random()).collect();
    (labels, sub_seeds)
}

/// Generates the cohort under `out_dir`: `manifest.csv`, `ground_truth.json`,
/// and one directory of volume files per patient. Returns the manifest (with
/// both labels populated; the task view is interchangeable) and the truth
/// record. Identical specs produce bit-identical trees.
pub fn generate_phantom_cohort(
    spec: &PhantomSpec,
    out_dir: impl AsRef<Path>,
) -> Result<(CohortManifest, GroundTruth)> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;

    let (labels, sub_seeds) = plan_patients(spec);

    let spec_meta = serde_json::to_string(spec).expect("spec serializes");
    let results: Vec<Result<(PatientRecord, PatientTruth)>> =
        par::map_indexed(spec.n_patients, |i| {
            let vols = generate_patient(spec, i, sub_seeds[i], labels[i]);
            write_patient(out_dir, &spec_meta, &vols)
        });

    let mut records = Vec::with_capacity(spec.n_patients);
    let mut patients = Vec::with_capacity(spec.n_patients);
    for r in results {
        let (rec, truth) = r?;
        records.push(rec);
        patients.push(truth);
    }

    let manifest_path = out_dir.join("manifest.csv");
    write_manifest(&manifest_path, &records)?;

    let truth = GroundTruth {
        seed: spec.seed,
        class_separation: spec.class_separation,
        noise_sigma: spec.noise_sigma,
        patients,
    };
    let truth_path = out_dir.join("ground_truth.json");
    let json = serde_json::to_string_pretty(&truth).expect("truth serializes");
    std::fs::write(&truth_path, json).map_err(|e| CoreError::io(&truth_path, e))?;

    Ok((
        CohortManifest {
            root: out_dir.to_path_buf(),
            task: Task::Grading,
            records,
        },
        truth,
    ))
}

fn write_patient(
    out_dir: &Path,
    spec_meta: &str,
    vols: &PatientVolumes,
) -> Result<(PatientRecord, PatientTruth)> {
    let truth = &vols.truth;
    let pdir = out_dir.join("patients").join(&truth.patient_id);
    std::fs::create_dir_all(&pdir).map_err(|e| CoreError::io(&pdir, e))?;

    let meta = |what: &str| format!("{{\"phantom\":{spec_meta},\"file\":\"{what}\"}}");

    let mut rec = PatientRecord::new(truth.patient_id.clone());
    rec.sbr_grade = Some(truth.sbr_grade);
    rec.pcr = Some(truth.pcr);

    let mut dwi_files = Vec::with_capacity(vols.dwi.len());
    for (b, vol) in &vols.dwi {
        let name = format!("dwi_b{}.vol", crate::cohort::format_bvalue(*b));
        write_volume(pdir.join(&name), vol, &meta(&name))?;
        dwi_files.push(ModalityFile {
            bvalue: Some(*b),
            path: PathBuf::from(format!("patients/{}/{name}", truth.patient_id)),
        });
    }
    rec.modalities.insert(MODALITY_DWI.into(), dwi_files);

    write_volume(pdir.join("adc.vol"), &vols.adc_map, &meta("adc.vol"))?;
    rec.modalities.insert(
        MODALITY_ADC.into(),
        vec![ModalityFile {
            bvalue: None,
            path: PathBuf::from(&truth.adc_map),
        }],
    );

    write_volume(pdir.join("t2w.vol"), &vols.s0_map, &meta("t2w.vol"))?;
    rec.modalities.insert(
        MODALITY_T2W.into(),
        vec![ModalityFile {
            bvalue: None,
            path: PathBuf::from(&truth.s0_map),
        }],
    );

    Ok((rec, truth.clone()))
}
