//! Cohort manifests, labels, validation, and DWI study loading.
//!
//! A manifest is a UTF-8 CSV with a header row and one row per patient file:
//! `patient_id,modality,bvalue,path,sbr_grade,pcr`. The `bvalue` cell is
//! blank for everything except `dwi` rows; absent labels are written as the
//! explicit sentinel `NA`, never as an empty cell. Paths are relative to the
//! manifest's directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::volume::{read_volume, Volume3D};

pub const MODALITY_DWI: &str = "dwi";
pub const MODALITY_ADC: &str = "adc";
pub const MODALITY_T2W: &str = "t2w";
pub const MODALITY_CDIS: &str = "cdis";

/// Sentinel written for absent labels.
pub const ABSENT_LABEL: &str = "NA";

/// Modalities every retained patient must provide.
pub const REQUIRED_MODALITIES: [&str; 3] = [MODALITY_DWI, MODALITY_ADC, MODALITY_T2W];

/// Prediction task selecting which label a cohort is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Grading,
    Pcr,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Grading => write!(f, "grading"),
            Task::Pcr => write!(f, "pcr"),
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "grading" => Ok(Task::Grading),
            "pcr" => Ok(Task::Pcr),
            other => Err(format!("unknown task {other:?} (expected grading|pcr)")),
        }
    }
}

/// Scarff-Bloom-Richardson histologic grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SbrGrade {
    I,
    II,
    III,
}

impl fmt::Display for SbrGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SbrGrade::I => write!(f, "I"),
            SbrGrade::II => write!(f, "II"),
            SbrGrade::III => write!(f, "III"),
        }
    }
}

impl FromStr for SbrGrade {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "I" => Ok(SbrGrade::I),
            "II" => Ok(SbrGrade::II),
            "III" => Ok(SbrGrade::III),
            other => Err(format!("unknown SBR grade {other:?} (expected I|II|III)")),
        }
    }
}

/// Grades I and II merge into the negative class; III is positive.
pub fn binarize_grade(grade: Option<SbrGrade>) -> Result<bool> {
    match grade {
        Some(SbrGrade::III) => Ok(true),
        Some(SbrGrade::I) | Some(SbrGrade::II) => Ok(false),
        None => Err(CoreError::AbsentGrade),
    }
}

/// Acquisition timepoint; only pre-treatment is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Timepoint {
    #[default]
    T0,
}

/// One file binding within a modality (b-value only for DWI).
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFile {
    pub bvalue: Option<f64>,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatientRecord {
    pub patient_id: String,
    /// modality name -> file(s); DWI holds one entry per b-value.
    pub modalities: BTreeMap<String, Vec<ModalityFile>>,
    pub sbr_grade: Option<SbrGrade>,
    pub pcr: Option<bool>,
    pub timepoint: Timepoint,
}

impl PatientRecord {
    pub fn new(patient_id: impl Into<String>) -> Self {
        PatientRecord {
            patient_id: patient_id.into(),
            ..Default::default()
        }
    }

    /// DWI files sorted by b-value.
    pub fn dwi_files(&self) -> Vec<(f64, &Path)> {
        let mut files: Vec<(f64, &Path)> = self
            .modalities
            .get(MODALITY_DWI)
            .map(|fs| {
                fs.iter()
                    .filter_map(|f| f.bvalue.map(|b| (b, f.path.as_path())))
                    .collect()
            })
            .unwrap_or_default();
        files.sort_by(|a, b| a.0.total_cmp(&b.0));
        files
    }

    /// The single file registered for a non-DWI modality, if any.
    pub fn single_path(&self, modality: &str) -> Option<&Path> {
        self.modalities
            .get(modality)
            .and_then(|fs| fs.first())
            .map(|f| f.path.as_path())
    }

    /// The binary label for `task` (errors when the label is absent).
    pub fn binary_label(&self, task: Task) -> Result<bool> {
        match task {
            Task::Grading => binarize_grade(self.sbr_grade),
            Task::Pcr => self.pcr.ok_or(CoreError::AbsentGrade),
        }
    }

    fn has_label(&self, task: Task) -> bool {
        match task {
            Task::Grading => self.sbr_grade.is_some(),
            Task::Pcr => self.pcr.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortManifest {
    /// Directory every record path is relative to.
    pub root: PathBuf,
    pub task: Task,
    pub records: Vec<PatientRecord>,
}

impl CohortManifest {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// One excluded patient with every reason that applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exclusion {
    pub patient_id: String,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ExclusionReport {
    pub excluded: Vec<Exclusion>,
}

impl ExclusionReport {
    pub fn len(&self) -> usize {
        self.excluded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.excluded.is_empty()
    }
}

impl fmt::Display for ExclusionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.excluded.is_empty() {
            return write!(f, "no exclusions");
        }
        for e in &self.excluded {
            writeln!(f, "{}: {}", e.patient_id, e.reasons.join("; "))?;
        }
        Ok(())
    }
}

const HEADER: [&str; 6] = ["patient_id", "modality", "bvalue", "path", "sbr_grade", "pcr"];

/// Loads a manifest and keeps exactly the records labeled for `task`,
/// preserving first-appearance order.
pub fn load_manifest(path: impl AsRef<Path>, task: Task) -> Result<CohortManifest> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => CoreError::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
            ),
            _ => CoreError::ManifestRow {
                row: 1,
                msg: e.to_string(),
            },
        })?;

    let headers = reader
        .headers()
        .map_err(|e| CoreError::ManifestRow {
            row: 1,
            msg: e.to_string(),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(CoreError::ManifestRow {
            row: 1,
            msg: format!("expected header {:?}, got {:?}", HEADER.join(","), headers),
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, PatientRecord> = BTreeMap::new();

    for (i, row) in reader.records().enumerate() {
        let row_no = i + 2; // header is row 1
        let row = row.map_err(|e| CoreError::ManifestRow {
            row: row_no,
            msg: e.to_string(),
        })?;
        if row.len() != HEADER.len() {
            return Err(CoreError::ManifestRow {
                row: row_no,
                msg: format!("expected {} columns, got {}", HEADER.len(), row.len()),
            });
        }
        parse_row(&row, row_no, &mut order, &mut by_id)?;
    }

    if order.is_empty() {
        return Err(CoreError::EmptyManifest { path: path.into() });
    }

    let records = order
        .into_iter()
        .map(|id| by_id.remove(&id).expect("ordered id present"))
        .filter(|r| r.has_label(task))
        .collect();

    Ok(CohortManifest {
        root: path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf(),
        task,
        records,
    })
}

fn parse_row(
    row: &csv::StringRecord,
    row_no: usize,
    order: &mut Vec<String>,
    by_id: &mut BTreeMap<String, PatientRecord>,
) -> Result<()> {
    let field = |i: usize| row.get(i).unwrap_or("");
    let patient_id = field(0).to_string();
    if patient_id.is_empty() {
        return Err(CoreError::ManifestRow {
            row: row_no,
            msg: "empty patient_id".into(),
        });
    }
    let modality = field(1).to_ascii_lowercase();
    if modality.is_empty() {
        return Err(CoreError::ManifestRow {
            row: row_no,
            msg: "empty modality".into(),
        });
    }
    let bvalue = match field(2) {
        "" => None,
        s => Some(s.parse::<f64>().map_err(|_| CoreError::ManifestRow {
            row: row_no,
            msg: format!("bad bvalue {s:?}"),
        })?),
    };
    if modality == MODALITY_DWI && bvalue.is_none() {
        return Err(CoreError::ManifestRow {
            row: row_no,
            msg: "dwi row without a bvalue".into(),
        });
    }
    let path = field(3);
    if path.is_empty() {
        return Err(CoreError::ManifestRow {
            row: row_no,
            msg: "empty path".into(),
        });
    }
    let sbr_grade = match field(4) {
        ABSENT_LABEL => None,
        s => Some(s.parse::<SbrGrade>().map_err(|e| CoreError::ManifestRow {
            row: row_no,
            msg: e,
        })?),
    };
    let pcr = match field(5) {
        ABSENT_LABEL => None,
        "true" => Some(true),
        "false" => Some(false),
        s => {
            return Err(CoreError::ManifestRow {
                row: row_no,
                msg: format!("bad pcr label {s:?} (expected true|false|NA)"),
            })
        }
    };

    if !by_id.contains_key(&patient_id) {
        order.push(patient_id.clone());
        by_id.insert(patient_id.clone(), PatientRecord::new(patient_id.clone()));
    }
    let rec = by_id.get_mut(&patient_id).expect("record just inserted");

    merge_label(&mut rec.sbr_grade, sbr_grade, &patient_id, "sbr_grade")?;
    merge_label(&mut rec.pcr, pcr, &patient_id, "pcr")?;

    let files = rec.modalities.entry(modality.clone()).or_default();
    let duplicate = files.iter().any(|f| match (f.bvalue, bvalue) {
        (Some(a), Some(b)) => a == b,
        (None, None) => true,
        _ => false,
    });
    if duplicate {
        return Err(CoreError::DuplicateEntry {
            patient_id,
            what: match bvalue {
                Some(b) => format!("{modality} row for b={b}"),
                None => format!("{modality} row"),
            },
        });
    }
    files.push(ModalityFile {
        bvalue,
        path: PathBuf::from(path),
    });
    Ok(())
}

fn merge_label<T: PartialEq + Copy + fmt::Debug>(
    slot: &mut Option<T>,
    new: Option<T>,
    patient_id: &str,
    field: &'static str,
) -> Result<()> {
    match (&slot, new) {
        (_, None) => Ok(()),
        (None, Some(v)) => {
            *slot = Some(v);
            Ok(())
        }
        (Some(old), Some(v)) if *old == v => Ok(()),
        (Some(old), Some(v)) => Err(CoreError::LabelConflict {
            patient_id: patient_id.to_string(),
            field,
            a: format!("{old:?}"),
            b: format!("{v:?}"),
        }),
    }
}

/// Writes records (all labels, `NA` for absent) as a manifest CSV.
pub fn write_manifest(path: impl AsRef<Path>, records: &[PatientRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| {
        CoreError::io(path, std::io::Error::other(e.to_string()))
    })?;
    w.write_record(HEADER)
        .map_err(|e| CoreError::io(path, std::io::Error::other(e.to_string())))?;
    for rec in records {
        let grade = rec
            .sbr_grade
            .map(|g| g.to_string())
            .unwrap_or_else(|| ABSENT_LABEL.to_string());
        let pcr = rec
            .pcr
            .map(|p| p.to_string())
            .unwrap_or_else(|| ABSENT_LABEL.to_string());
        for (modality, files) in &rec.modalities {
            for f in files {
                let b = f.bvalue.map(format_bvalue).unwrap_or_default();
                w.write_record([
                    rec.patient_id.as_str(),
                    modality.as_str(),
                    b.as_str(),
                    &f.path.to_string_lossy(),
                    grade.as_str(),
                    pcr.as_str(),
                ])
                .map_err(|e| CoreError::io(path, std::io::Error::other(e.to_string())))?;
            }
        }
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

/// Integers render without a trailing `.0` so manifests stay diff-friendly.
pub fn format_bvalue(b: f64) -> String {
    if b.fract() == 0.0 && b.abs() < 1e15 {
        format!("{}", b as i64)
    } else {
        format!("{b}")
    }
}

/// Drops records missing a required modality, a referenced file on disk, or
/// the task label; reports every excluded patient with its reasons.
///
/// Idempotent: validating the retained manifest excludes nothing further.
pub fn validate_cohort(manifest: &CohortManifest) -> (CohortManifest, ExclusionReport) {
    validate_cohort_with(manifest, &REQUIRED_MODALITIES)
}

/// [`validate_cohort`] with an explicit required-modality set.
pub fn validate_cohort_with(
    manifest: &CohortManifest,
    required_modalities: &[&str],
) -> (CohortManifest, ExclusionReport) {
    let mut retained = Vec::with_capacity(manifest.records.len());
    let mut excluded = Vec::new();

    for rec in &manifest.records {
        let mut reasons = Vec::new();
        if !rec.has_label(manifest.task) {
            reasons.push(format!("missing {} label", manifest.task));
        }
        for modality in required_modalities {
            match rec.modalities.get(*modality) {
                None => reasons.push(format!("missing modality {modality}")),
                Some(files) => {
                    for f in files {
                        let p = manifest.resolve(&f.path);
                        if !p.is_file() {
                            reasons.push(format!("missing file {}", f.path.display()));
                        }
                    }
                }
            }
        }
        if reasons.is_empty() {
            retained.push(rec.clone());
        } else {
            excluded.push(Exclusion {
                patient_id: rec.patient_id.clone(),
                reasons,
            });
        }
    }

    (
        CohortManifest {
            root: manifest.root.clone(),
            task: manifest.task,
            records: retained,
        },
        ExclusionReport { excluded },
    )
}

/// A set of co-registered DWI volumes indexed by strictly increasing b-value.
#[derive(Debug, Clone, PartialEq)]
pub struct DwiStudy {
    bvalues: Vec<f64>,
    volumes: Vec<Volume3D>,
}

impl DwiStudy {
    /// Sorts by b-value and validates uniqueness, non-negativity, and grid
    /// consistency.
    pub fn new(pairs: Vec<(f64, Volume3D)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(CoreError::TooFewBValues { needed: 1, got: 0 });
        }
        let mut pairs = pairs;
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(CoreError::DuplicateBValue { b: w[0].0 });
            }
        }
        if pairs[0].0 < 0.0 {
            return Err(CoreError::NegativeBValue { b: pairs[0].0 });
        }
        let first = &pairs[0].1;
        for (_, vol) in &pairs[1..] {
            if !first.same_grid(vol) {
                return Err(CoreError::GridMismatch {
                    expected_dims: first.dims(),
                    found_dims: vol.dims(),
                    expected_spacing: first.spacing(),
                    found_spacing: vol.spacing(),
                });
            }
        }
        let (bvalues, volumes) = pairs.into_iter().unzip();
        Ok(DwiStudy { bvalues, volumes })
    }

    pub fn bvalues(&self) -> &[f64] {
        &self.bvalues
    }

    pub fn volumes(&self) -> &[Volume3D] {
        &self.volumes
    }

    pub fn volume_for(&self, b: f64) -> Option<&Volume3D> {
        self.bvalues
            .iter()
            .position(|&x| x == b)
            .map(|i| &self.volumes[i])
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.volumes[0].dims()
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.volumes[0].spacing()
    }

    /// The sub-study restricted to `bvalues` (order-insensitive).
    pub fn subset(&self, bvalues: &[f64]) -> Result<DwiStudy> {
        let mut pairs = Vec::with_capacity(bvalues.len());
        for &b in bvalues {
            let vol = self
                .volume_for(b)
                .ok_or(CoreError::NativeBValueMissing { b })?;
            pairs.push((b, vol.clone()));
        }
        DwiStudy::new(pairs)
    }
}

/// Loads volumes from disk and co-indexes them with sorted b-values.
pub fn load_dwi_study(paths: &[PathBuf], bvalues: &[f64]) -> Result<DwiStudy> {
    if paths.len() != bvalues.len() {
        return Err(CoreError::BValueCountMismatch {
            expected: bvalues.len(),
            found: paths.len(),
        });
    }
    let mut pairs = Vec::with_capacity(paths.len());
    for (path, &b) in paths.iter().zip(bvalues) {
        let (vol, _) = read_volume(path)?;
        pairs.push((b, vol));
    }
    DwiStudy::new(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest_csv(rows: &[&str]) -> String {
        let mut s = String::from("patient_id,modality,bvalue,path,sbr_grade,pcr\n");
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    fn write_tmp_manifest(dir: &Path, rows: &[&str]) -> PathBuf {
        let path = dir.join("manifest.csv");
        std::fs::write(&path, manifest_csv(rows)).unwrap();
        path
    }

    #[test]
    fn binarize_follows_the_category_merge() {
        assert!(binarize_grade(Some(SbrGrade::III)).unwrap());
        assert!(!binarize_grade(Some(SbrGrade::I)).unwrap());
        assert!(!binarize_grade(Some(SbrGrade::II)).unwrap());
        assert!(matches!(binarize_grade(None), Err(CoreError::AbsentGrade)));
    }

    #[test]
    fn cohort_grade_distribution_binarizes_175_77() {
        // 5 grade I, 72 grade II, 175 grade III
        let grades: Vec<SbrGrade> = std::iter::repeat(SbrGrade::I)
            .take(5)
            .chain(std::iter::repeat(SbrGrade::II).take(72))
            .chain(std::iter::repeat(SbrGrade::III).take(175))
            .collect();
        let pos = grades
            .iter()
            .filter(|g| binarize_grade(Some(**g)).unwrap())
            .count();
        assert_eq!(pos, 175);
        assert_eq!(grades.len() - pos, 77);
    }

    #[test]
    fn load_keeps_only_task_labeled_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp_manifest(
            dir.path(),
            &[
                "p0,adc,,p0/adc.vol,III,true",
                "p1,adc,,p1/adc.vol,NA,true",
                "p2,adc,,p2/adc.vol,II,NA",
            ],
        );
        let grading = load_manifest(&path, Task::Grading).unwrap();
        assert_eq!(
            grading.records.iter().map(|r| r.patient_id.as_str()).collect::<Vec<_>>(),
            ["p0", "p2"]
        );
        let pcr = load_manifest(&path, Task::Pcr).unwrap();
        assert_eq!(
            pcr.records.iter().map(|r| r.patient_id.as_str()).collect::<Vec<_>>(),
            ["p0", "p1"]
        );
    }

    #[test]
    fn empty_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp_manifest(dir.path(), &[]);
        assert!(matches!(
            load_manifest(&path, Task::Pcr),
            Err(CoreError::EmptyManifest { .. })
        ));
    }

    #[test]
    fn missing_file_is_an_error() {
        let err = load_manifest("/nonexistent/manifest.csv", Task::Pcr);
        assert!(matches!(err, Err(CoreError::Io { .. })));
    }

    #[test]
    fn malformed_row_reports_row_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp_manifest(
            dir.path(),
            &["p0,adc,,p0/adc.vol,III,true", "p1,dwi,zzz,p1/b0.vol,NA,true"],
        );
        match load_manifest(&path, Task::Pcr) {
            Err(CoreError::ManifestRow { row, msg }) => {
                assert_eq!(row, 3);
                assert!(msg.contains("bvalue"), "{msg}");
            }
            other => panic!("expected ManifestRow error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_binding_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp_manifest(
            dir.path(),
            &["p0,dwi,0,p0/b0.vol,NA,true", "p0,dwi,0,p0/b0_again.vol,NA,true"],
        );
        assert!(matches!(
            load_manifest(&path, Task::Pcr),
            Err(CoreError::DuplicateEntry { .. })
        ));
    }

    #[test]
    fn conflicting_labels_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp_manifest(
            dir.path(),
            &["p0,adc,,p0/adc.vol,III,true", "p0,t2w,,p0/t2w.vol,II,true"],
        );
        assert!(matches!(
            load_manifest(&path, Task::Grading),
            Err(CoreError::LabelConflict { .. })
        ));
    }

    #[test]
    fn manifest_roundtrip_is_structurally_equal() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = PatientRecord::new("p7");
        rec.sbr_grade = Some(SbrGrade::II);
        rec.pcr = Some(false);
        rec.modalities.insert(
            MODALITY_DWI.into(),
            vec![
                ModalityFile { bvalue: Some(0.0), path: "p7/b0.vol".into() },
                ModalityFile { bvalue: Some(800.0), path: "p7/b800.vol".into() },
            ],
        );
        rec.modalities.insert(
            MODALITY_ADC.into(),
            vec![ModalityFile { bvalue: None, path: "p7/adc.vol".into() }],
        );
        rec.modalities.insert(
            MODALITY_T2W.into(),
            vec![ModalityFile { bvalue: None, path: "p7/t2w.vol".into() }],
        );
        let records = vec![rec];
        let path = dir.path().join("manifest.csv");
        write_manifest(&path, &records).unwrap();
        let back = load_manifest(&path, Task::Grading).unwrap();
        assert_eq!(back.records, records);
        assert_eq!(back.task, Task::Grading);
    }

    #[test]
    fn validation_excludes_and_partitions() {
        let dir = tempfile::tempdir().unwrap();
        // Three complete patients, three missing their DWI rows entirely.
        let mut rows = Vec::new();
        for i in 0..6 {
            let id = format!("p{i}");
            if i < 3 {
                rows.push(format!("{id},dwi,0,{id}/b0.vol,III,true"));
            }
            rows.push(format!("{id},adc,,{id}/adc.vol,III,true"));
            rows.push(format!("{id},t2w,,{id}/t2w.vol,III,true"));
        }
        let rows: Vec<&str> = rows.iter().map(|s| s.as_str()).collect();
        let path = write_tmp_manifest(dir.path(), &rows);
        // Create every referenced file so only the missing-modality reason fires.
        for i in 0..6 {
            let pdir = dir.path().join(format!("p{i}"));
            std::fs::create_dir_all(&pdir).unwrap();
            for name in ["b0.vol", "adc.vol", "t2w.vol"] {
                let vol = Volume3D::filled((1, 1, 1), (1.0, 1.0, 1.0), 1.0);
                crate::volume::write_volume(pdir.join(name), &vol, "").unwrap();
            }
        }
        let manifest = load_manifest(&path, Task::Grading).unwrap();
        let (kept, report) = validate_cohort(&manifest);
        assert_eq!(kept.len() + report.len(), manifest.len());
        assert_eq!(
            report.excluded.iter().map(|e| e.patient_id.as_str()).collect::<Vec<_>>(),
            ["p3", "p4", "p5"]
        );
        // Idempotent: a second pass excludes nothing.
        let (kept2, report2) = validate_cohort(&kept);
        assert_eq!(kept2, kept);
        assert!(report2.is_empty());
    }

    #[test]
    fn validation_flags_missing_task_label() {
        let mut rec = PatientRecord::new("p0");
        rec.pcr = Some(true);
        let manifest = CohortManifest {
            root: PathBuf::from("."),
            task: Task::Grading,
            records: vec![rec],
        };
        let (kept, report) = validate_cohort_with(&manifest, &[]);
        assert!(kept.is_empty());
        assert_eq!(report.excluded[0].reasons, vec!["missing grading label"]);
    }

    #[test]
    fn study_sorts_bvalues_and_checks_grids() {
        let v = |val: f64| Volume3D::filled((2, 2, 1), (1.0, 1.0, 1.0), val);
        let study = DwiStudy::new(vec![(600.0, v(3.0)), (0.0, v(1.0)), (800.0, v(4.0)), (100.0, v(2.0))])
            .unwrap();
        assert_eq!(study.bvalues(), [0.0, 100.0, 600.0, 800.0]);
        assert_eq!(study.volume_for(600.0).unwrap().data()[0], 3.0);

        let single = DwiStudy::new(vec![(0.0, v(1.0))]).unwrap();
        assert_eq!(single.bvalues(), [0.0]);

        let mismatch = DwiStudy::new(vec![
            (0.0, v(1.0)),
            (100.0, Volume3D::filled((3, 2, 1), (1.0, 1.0, 1.0), 2.0)),
        ]);
        assert!(matches!(mismatch, Err(CoreError::GridMismatch { .. })));

        let dup = DwiStudy::new(vec![(0.0, v(1.0)), (0.0, v(2.0))]);
        assert!(matches!(dup, Err(CoreError::DuplicateBValue { .. })));

        let neg = DwiStudy::new(vec![(-5.0, v(1.0))]);
        assert!(matches!(neg, Err(CoreError::NegativeBValue { .. })));
    }
}
