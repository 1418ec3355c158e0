//! Modality naming, report files, and the cross-modality comparison table.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use cdis_core::cohort::format_bvalue;

use crate::error::{EvalError, Result};
use crate::metrics::{FoldResult, MetricsReport};

/// An imaging modality selection for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum Modality {
    Cdis,
    Adc,
    T2w,
    /// All DWI b-values stacked as input channels.
    DwiStacked,
    /// A single DWI acquisition at this b-value.
    DwiSingle(f64),
}

impl Modality {
    /// Canonical machine key (also the cache directory name).
    pub fn key(&self) -> String {
        match self {
            Modality::Cdis => "cdis".into(),
            Modality::Adc => "adc".into(),
            Modality::T2w => "t2w".into(),
            Modality::DwiStacked => "dwi-stacked".into(),
            Modality::DwiSingle(b) => format!("dwi-b{}", format_bvalue(*b)),
        }
    }

    /// Display label; the stacked variant lists the cohort's b-values.
    pub fn label(&self, native_bvalues: &[f64]) -> String {
        match self {
            Modality::Cdis => "CDIs".into(),
            Modality::Adc => "ADC".into(),
            Modality::T2w => "T2w".into(),
            Modality::DwiStacked => {
                let bs: Vec<String> = native_bvalues.iter().map(|b| format_bvalue(*b)).collect();
                format!("DWI (b={})", bs.join(", "))
            }
            Modality::DwiSingle(b) => format!("DWI (b={})", format_bvalue(*b)),
        }
    }
}

impl FromStr for Modality {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "cdis" => Ok(Modality::Cdis),
            "adc" => Ok(Modality::Adc),
            "t2w" => Ok(Modality::T2w),
            "dwi-stacked" => Ok(Modality::DwiStacked),
            other => {
                if let Some(b) = other.strip_prefix("dwi-b") {
                    b.parse::<f64>()
                        .ok()
                        .filter(|b| b.is_finite() && *b >= 0.0)
                        .map(Modality::DwiSingle)
                        .ok_or_else(|| EvalError::UnknownModality(s.to_string()))
                } else {
                    Err(EvalError::UnknownModality(s.to_string()))
                }
            }
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.key())
    }
}

/// The on-disk machine-readable report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub format: String,
    pub report: MetricsReport,
    pub folds: Vec<FoldResult>,
}

pub const REPORT_FORMAT: &str = "cdis-report-v1";

pub fn write_report(path: impl AsRef<Path>, report: &MetricsReport, folds: &[FoldResult]) -> Result<()> {
    let path = path.as_ref();
    let file = ReportFile {
        format: REPORT_FORMAT.into(),
        report: report.clone(),
        folds: folds.to_vec(),
    };
    let json = serde_json::to_string_pretty(&file).expect("report serializes");
    std::fs::write(path, json).map_err(|e| EvalError::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<ReportFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| EvalError::io(path, e))?;
    let file: ReportFile = serde_json::from_slice(&bytes).map_err(|e| EvalError::BadReport {
        path: path.into(),
        msg: e.to_string(),
    })?;
    if file.format != REPORT_FORMAT {
        return Err(EvalError::BadReport {
            path: path.into(),
            msg: format!("unsupported format {:?}", file.format),
        });
    }
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub modality: String,
    pub modality_label: String,
    pub accuracy_pct: f64,
    pub sensitivity_pct: Option<f64>,
    pub specificity_pct: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub best: bool,
}

/// One row per modality, best accuracy first and flagged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub task: cdis_core::Task,
    pub fingerprint: String,
    pub tool_version: String,
    pub rows: Vec<ComparisonRow>,
}

/// Builds the comparison from per-modality reports of one task.
pub fn compare_modalities(reports: &[MetricsReport]) -> Result<ComparisonTable> {
    let first = reports.first().ok_or(EvalError::EmptyResults)?;
    if reports.iter().any(|r| r.task != first.task) {
        return Err(EvalError::MixedTasks);
    }
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            modality: r.modality.clone(),
            modality_label: r.modality_label.clone(),
            accuracy_pct: r.accuracy_pct,
            sensitivity_pct: r.sensitivity_pct,
            specificity_pct: r.specificity_pct,
            tp: r.tp,
            fp: r.fp,
            tn: r.tn,
            fn_: r.fn_,
            best: false,
        })
        .collect();
    rows.sort_by(|a, b| b.accuracy_pct.total_cmp(&a.accuracy_pct));
    rows[0].best = true;
    Ok(ComparisonTable {
        task: first.task,
        fingerprint: first.fingerprint.clone(),
        tool_version: first.tool_version.clone(),
        rows,
    })
}

impl ComparisonTable {
    /// Aligned text table; `*` flags the best-accuracy row.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "LOOCV comparison | task: {} | config {}\n",
            self.task,
            &self.fingerprint[..self.fingerprint.len().min(12)]
        ));
        let width = self
            .rows
            .iter()
            .map(|r| r.modality_label.len())
            .max()
            .unwrap_or(8)
            .max("Modality".len());
        out.push_str(&format!(
            "  {:<width$}  {:>10}  {:>12}  {:>12}\n",
            "Modality", "Accuracy", "Sensitivity", "Specificity"
        ));
        for row in &self.rows {
            let flag = if row.best { '*' } else { ' ' };
            out.push_str(&format!(
                "{flag} {:<width$}  {:>10}  {:>12}  {:>12}\n",
                row.modality_label,
                crate::metrics::pct_display(Some(row.accuracy_pct)),
                crate::metrics::pct_display(row.sensitivity_pct),
                crate::metrics::pct_display(row.specificity_pct),
            ));
        }
        out
    }

    /// One CSV record per modality row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "task,modality,modality_label,accuracy,sensitivity,specificity,tp,fp,tn,fn,best\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},\"{}\",{},{},{},{},{},{},{},{}\n",
                self.task,
                r.modality,
                r.modality_label,
                crate::metrics::pct_display(Some(r.accuracy_pct)),
                crate::metrics::pct_display(r.sensitivity_pct),
                crate::metrics::pct_display(r.specificity_pct),
                r.tp,
                r.fp,
                r.tn,
                r.fn_,
                r.best
            ));
        }
        out
    }
}
