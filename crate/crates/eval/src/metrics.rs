//! Confusion-matrix metrics over leave-one-out fold results.
//!
//! Percentages are held at full precision and rounded to two decimals only
//! for display; undefined rates (zero denominators) render as `N/A`, never
//! as zero.

use serde::{Deserialize, Serialize};

use cdis_core::Task;

use crate::error::{EvalError, Result};

/// One held-out patient's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub patient_id: String,
    pub true_label: bool,
    pub predicted_label: bool,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Tallies the confusion matrix; errors on an empty result list.
pub fn compute_counts(results: &[FoldResult]) -> Result<Counts> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let mut c = Counts::default();
    for r in results {
        match (r.true_label, r.predicted_label) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn pct(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(100.0 * num as f64 / den as f64)
    }
}

/// Two-decimal display; `N/A` for undefined rates.
pub fn pct_display(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.2}%"),
        None => "N/A".to_string(),
    }
}

/// Identification carried into a metrics report.
#[derive(Debug, Clone)]
pub struct ReportContext {
    pub task: Task,
    /// Canonical modality key, e.g. `dwi-b800`.
    pub modality: String,
    /// Display label, e.g. `DWI (b=800)`.
    pub modality_label: String,
    pub fingerprint: String,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub modality: String,
    pub modality_label: String,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Percentage in [0, 100], full precision.
    pub accuracy_pct: f64,
    /// None when there are no positives (rendered as N/A).
    pub sensitivity_pct: Option<f64>,
    /// None when there are no negatives (rendered as N/A).
    pub specificity_pct: Option<f64>,
    pub fingerprint: String,
    pub tool_version: String,
}

impl MetricsReport {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy_display(&self) -> String {
        pct_display(Some(self.accuracy_pct))
    }

    pub fn sensitivity_display(&self) -> String {
        pct_display(self.sensitivity_pct)
    }

    pub fn specificity_display(&self) -> String {
        pct_display(self.specificity_pct)
    }
}

/// Aggregates fold results into a report.
pub fn compute_metrics(results: &[FoldResult], ctx: &ReportContext) -> Result<MetricsReport> {
    let c = compute_counts(results)?;
    Ok(MetricsReport {
        task: ctx.task,
        modality: ctx.modality.clone(),
        modality_label: ctx.modality_label.clone(),
        tp: c.tp,
        fp: c.fp,
        tn: c.tn,
        fn_: c.fn_,
        accuracy_pct: pct(c.tp + c.tn, c.total()).expect("nonempty results"),
        sensitivity_pct: pct(c.tp, c.tp + c.fn_),
        specificity_pct: pct(c.tn, c.tn + c.fp),
        fingerprint: ctx.fingerprint.clone(),
        tool_version: ctx.tool_version.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> ReportContext {
        ReportContext {
            task: Task::Grading,
            modality: "adc".into(),
            modality_label: "ADC".into(),
            fingerprint: "f".into(),
            tool_version: "v".into(),
        }
    }

    fn fold(truth: bool, pred: bool) -> FoldResult {
        FoldResult {
            patient_id: "p".into(),
            true_label: truth,
            predicted_label: pred,
            probability: if pred { 0.9 } else { 0.1 },
        }
    }

    #[test]
    fn all_positive_classifier_matches_published_adc_row() {
        // 175 positives, 77 negatives, everything predicted positive.
        let mut results = Vec::new();
        for _ in 0..175 {
            results.push(fold(true, true));
        }
        for _ in 0..77 {
            results.push(fold(false, true));
        }
        let report = compute_metrics(&results, &ctx()).unwrap();
        assert_eq!((report.tp, report.fp, report.tn, report.fn_), (175, 77, 0, 0));
        assert_eq!(report.accuracy_display(), "69.44%");
        assert_eq!(report.sensitivity_display(), "100.00%");
        assert_eq!(report.specificity_display(), "0.00%");
    }

    #[test]
    fn perfect_predictions_are_all_hundred() {
        let mut results = vec![fold(true, true), fold(false, false)];
        results.extend((0..10).map(|i| fold(i % 2 == 0, i % 2 == 0)));
        let report = compute_metrics(&results, &ctx()).unwrap();
        assert_eq!(report.accuracy_display(), "100.00%");
        assert_eq!(report.sensitivity_display(), "100.00%");
        assert_eq!(report.specificity_display(), "100.00%");
    }

    #[test]
    fn direct_ratio_case() {
        // tp=3, fp=1, tn=2, fn=2.
        let mut results = Vec::new();
        results.extend((0..3).map(|_| fold(true, true)));
        results.push(fold(false, true));
        results.extend((0..2).map(|_| fold(false, false)));
        results.extend((0..2).map(|_| fold(true, false)));
        let report = compute_metrics(&results, &ctx()).unwrap();
        assert_eq!(report.accuracy_display(), "62.50%");
        assert_eq!(report.sensitivity_display(), "60.00%");
        assert_eq!(report.specificity_display(), "66.67%");
    }

    #[test]
    fn undefined_rates_render_na() {
        let results = vec![fold(true, true), fold(true, false)];
        let report = compute_metrics(&results, &ctx()).unwrap();
        assert_eq!(report.specificity_display(), "N/A");
        assert!(report.specificity_pct.is_none());
    }

    #[test]
    fn empty_results_error() {
        assert!(matches!(
            compute_metrics(&[], &ctx()),
            Err(EvalError::EmptyResults)
        ));
    }

    #[test]
    fn metric_algebra_holds() {
        // accuracy = (sens*P + spec*N) / (P+N) at full precision.
        let mut results = Vec::new();
        for i in 0..37 {
            results.push(fold(true, i % 3 != 0));
        }
        for i in 0..23 {
            results.push(fold(false, i % 4 == 0));
        }
        let r = compute_metrics(&results, &ctx()).unwrap();
        let p = (r.tp + r.fn_) as f64;
        let n = (r.tn + r.fp) as f64;
        let lhs = r.accuracy_pct;
        let rhs = (r.sensitivity_pct.unwrap() * p + r.specificity_pct.unwrap() * n) / (p + n);
        assert!((lhs - rhs).abs() < 1e-9);
        assert_eq!(r.total(), results.len());
    }
}
