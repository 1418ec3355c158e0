//! Per-voxel monoexponential diffusion fit and signal synthesis.
//!
//! The decay model is `S(b) = S0 * exp(-b * ADC)`, fit per voxel as the
//! least-squares line through `(b, ln max(S(b), epsilon))`. The log floor
//! keeps background air voxels finite; by default it is 1e-6 of the pooled
//! 99th-percentile intensity of the study.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::cohort::DwiStudy;
use crate::error::{CoreError, Result};
use crate::par;
use crate::volume::Volume3D;

/// Scale applied to the pooled 99th-percentile intensity.
pub const EPSILON_P99_SCALE: f64 = 1e-6;

/// Absolute floor used when a study carries no positive signal at all.
pub const EPSILON_FALLBACK: f64 = 1e-6;

/// Per-voxel fit: baseline signal, decay coefficient, and log-domain RMS
/// residual, all on the study grid.
#[derive(Debug, Clone)]
pub struct AdcFit {
    pub s0: Volume3D,
    pub adc: Volume3D,
    pub residual: Volume3D,
    /// Log floor the fit used.
    pub epsilon: f64,
    /// Negative input intensities clamped to zero before fitting.
    pub clamped_negatives: usize,
}

impl AdcFit {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.s0.dims()
    }
}

/// The default log floor for `study` (1e-6 of the pooled p99 intensity).
pub fn default_epsilon(study: &DwiStudy) -> f64 {
    let mut pooled: Vec<f64> = study
        .volumes()
        .iter()
        .flat_map(|v| v.data().iter().copied())
        .collect();
    pooled.sort_by(f64::total_cmp);
    let idx = ((pooled.len() - 1) as f64 * 0.99).round() as usize;
    let p99 = pooled[idx];
    if p99 > 0.0 {
        EPSILON_P99_SCALE * p99
    } else {
        EPSILON_FALLBACK
    }
}

/// Fits the decay model with the study-derived default epsilon.
pub fn fit_adc(study: &DwiStudy) -> Result<AdcFit> {
    fit_adc_with_epsilon(study, default_epsilon(study))
}

/// Fits the decay model with an explicit log floor.
///
/// Requires at least two distinct b-values. Negative intensities are clamped
/// to zero and counted; an all-zero voxel column is legal and fits the
/// constant `ln(epsilon)` line.
pub fn fit_adc_with_epsilon(study: &DwiStudy, epsilon: f64) -> Result<AdcFit> {
    let m = study.bvalues().len();
    if m < 2 {
        return Err(CoreError::TooFewBValues { needed: 2, got: m });
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(CoreError::InvalidMixing(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }

    let bvalues = study.bvalues().to_vec();
    let mean_b = bvalues.iter().sum::<f64>() / m as f64;
    let dev: Vec<f64> = bvalues.iter().map(|b| b - mean_b).collect();
    let sxx: f64 = dev.iter().map(|d| d * d).sum();

    let dims = study.dims();
    let spacing = study.spacing();
    let n = dims.0 * dims.1 * dims.2;
    let signals: Vec<&[f64]> = study.volumes().iter().map(|v| v.data()).collect();

    // One (s0, adc, residual) triple per voxel, assembled in parallel.
    let mut packed = vec![0.0f64; 3 * n];
    let clamped = AtomicUsize::new(0);

    const VOXELS_PER_CHUNK: usize = 4096;
    par::for_each_chunk_mut(&mut packed, 3 * VOXELS_PER_CHUNK, |chunk_idx, chunk| {
        let base = chunk_idx * VOXELS_PER_CHUNK;
        let mut logs = vec![0.0f64; m];
        let mut local_clamped = 0usize;
        for (k, triple) in chunk.chunks_exact_mut(3).enumerate() {
            let i = base + k;
            let mut sum_y = 0.0;
            let mut sum_dy = 0.0;
            for (j, col) in signals.iter().enumerate() {
                let mut s = col[i];
                if s < 0.0 {
                    s = 0.0;
                    local_clamped += 1;
                }
                let y = s.max(epsilon).ln();
                logs[j] = y;
                sum_y += y;
                sum_dy += dev[j] * y;
            }
            let slope = sum_dy / sxx;
            let intercept = sum_y / m as f64 - slope * mean_b;
            let mut sq = 0.0;
            for j in 0..m {
                let e = logs[j] - (intercept + slope * bvalues[j]);
                sq += e * e;
            }
            triple[0] = intercept.exp();
            triple[1] = -slope;
            triple[2] = (sq / m as f64).sqrt();
        }
        clamped.fetch_add(local_clamped, Ordering::Relaxed);
    });

    let mut s0 = Vec::with_capacity(n);
    let mut adc = Vec::with_capacity(n);
    let mut residual = Vec::with_capacity(n);
    for t in packed.chunks_exact(3) {
        s0.push(t[0]);
        adc.push(t[1]);
        residual.push(t[2]);
    }

    Ok(AdcFit {
        s0: Volume3D::new(dims, spacing, s0)?,
        adc: Volume3D::new(dims, spacing, adc)?,
        residual: Volume3D::new(dims, spacing, residual)?,
        epsilon,
        clamped_negatives: clamped.into_inner(),
    })
}

/// Evaluates `S0 * exp(-b * ADC)` per voxel at a non-negative b-value.
pub fn synthesize_signal(fit: &AdcFit, b: f64) -> Result<Volume3D> {
    if b < 0.0 || !b.is_finite() {
        return Err(CoreError::NegativeBValue { b });
    }
    let s0 = fit.s0.data();
    let adc = fit.adc.data();
    let mut out = vec![0.0f64; s0.len()];
    par::for_each_chunk_mut(&mut out, 8192, |chunk_idx, chunk| {
        let base = chunk_idx * 8192;
        for (k, o) in chunk.iter_mut().enumerate() {
            let i = base + k;
            *o = s0[i] * (-b * adc[i]).exp();
        }
    });
    Volume3D::new(fit.s0.dims(), fit.s0.spacing(), out)
}
