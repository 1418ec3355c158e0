//! Native + synthetic signal mixing into a single correlated-diffusion volume.
//!
//! The mixed signal is a coefficient-weighted geometric mean over the union
//! of native and synthetic b-values: per voxel,
//! `prod_b max(S_b, epsilon)^rho_b`, computed in the log domain. The default
//! coefficients are uniform (`rho_b = 1/|B|`, summing to 1), which makes the
//! output scale linearly with the input signals; the coefficient map is the
//! extension point for tuned weightings.

use serde::{Deserialize, Serialize};

use crate::adc::{fit_adc_with_epsilon, synthesize_signal};
use crate::cohort::DwiStudy;
use crate::error::{CoreError, Result};
use crate::par;
use crate::volume::Volume3D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingConfig {
    /// Acquired b-values consumed by the fit (must exist in the study).
    pub native_bvalues: Vec<f64>,
    /// Extrapolated b-values produced by the signal synthesizer.
    pub synthetic_bvalues: Vec<f64>,
    /// `(b, rho_b)` covering exactly the native + synthetic union.
    pub coefficients: Vec<(f64, f64)>,
    /// Log-domain floor; must be positive.
    pub epsilon: f64,
}

impl MixingConfig {
    /// Uniform coefficients `rho_b = 1/|B|` over the b-value union.
    pub fn uniform(native: &[f64], synthetic: &[f64], epsilon: f64) -> Self {
        let total = native.len() + synthetic.len();
        let rho = if total == 0 { 0.0 } else { 1.0 / total as f64 };
        let coefficients = native
            .iter()
            .chain(synthetic.iter())
            .map(|&b| (b, rho))
            .collect();
        MixingConfig {
            native_bvalues: native.to_vec(),
            synthetic_bvalues: synthetic.to_vec(),
            coefficients,
            epsilon,
        }
    }

    pub fn rho_for(&self, b: f64) -> Option<f64> {
        self.coefficients
            .iter()
            .find(|(cb, _)| *cb == b)
            .map(|(_, r)| *r)
    }

    pub fn rho_sum(&self) -> f64 {
        self.coefficients.iter().map(|(_, r)| r).sum()
    }

    /// All b-values entering the product, native first then synthetic.
    pub fn all_bvalues(&self) -> Vec<f64> {
        self.native_bvalues
            .iter()
            .chain(self.synthetic_bvalues.iter())
            .copied()
            .collect()
    }

    /// Checks epsilon, duplicate-free b-value sets, and that the coefficient
    /// map covers exactly the native + synthetic union.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(CoreError::InvalidMixing(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if self.native_bvalues.is_empty() {
            return Err(CoreError::InvalidMixing(
                "native b-value list is empty".into(),
            ));
        }
        let all = self.all_bvalues();
        for (i, &b) in all.iter().enumerate() {
            if b < 0.0 || !b.is_finite() {
                return Err(CoreError::NegativeBValue { b });
            }
            if all[..i].contains(&b) {
                return Err(CoreError::InvalidMixing(format!(
                    "b={b} appears twice in the native/synthetic union"
                )));
            }
        }
        for &b in &all {
            match self.rho_for(b) {
                None => return Err(CoreError::MissingCoefficient { b }),
                Some(r) if !r.is_finite() => {
                    return Err(CoreError::InvalidMixing(format!(
                        "coefficient for b={b} is not finite"
                    )))
                }
                Some(_) => {}
            }
        }
        if self.coefficients.len() != all.len() {
            return Err(CoreError::InvalidMixing(format!(
                "coefficient map has {} entries for {} b-values",
                self.coefficients.len(),
                all.len()
            )));
        }
        Ok(())
    }
}

/// Fits the native signals, synthesizes the extrapolated ones, and mixes the
/// union into one volume.
///
/// The fit only runs when synthetic b-values are requested, so a single
/// native b-value with no synthetics is the plain identity product.
pub fn compute_cdis(study: &DwiStudy, config: &MixingConfig) -> Result<Volume3D> {
    config.validate()?;
    let native = study.subset(&config.native_bvalues)?;

    let dims = study.dims();
    let n = dims.0 * dims.1 * dims.2;
    let mut log_acc = vec![0.0f64; n];

    let accumulate = |signal: &[f64], rho: f64, eps: f64, acc: &mut [f64]| {
        par::for_each_chunk_mut(acc, 8192, |chunk_idx, chunk| {
            let base = chunk_idx * 8192;
            for (k, a) in chunk.iter_mut().enumerate() {
                *a += rho * signal[base + k].max(eps).ln();
            }
        });
    };

    for &b in &config.native_bvalues {
        let rho = config.rho_for(b).expect("validated coefficient");
        let vol = native.volume_for(b).expect("validated native subset");
        accumulate(vol.data(), rho, config.epsilon, &mut log_acc);
    }
    if !config.synthetic_bvalues.is_empty() {
        let fit = fit_adc_with_epsilon(&native, config.epsilon)?;
        for &b in &config.synthetic_bvalues {
            let rho = config.rho_for(b).expect("validated coefficient");
            let vol = synthesize_signal(&fit, b)?;
            accumulate(vol.data(), rho, config.epsilon, &mut log_acc);
        }
    }

    par::for_each_elem_mut(&mut log_acc, |_, v| *v = v.exp());
    Volume3D::new(dims, study.spacing(), log_acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    const B_SET: [f64; 4] = [0.0, 100.0, 600.0, 800.0];
    const SYNTH: [f64; 3] = [1000.0, 1500.0, 2000.0];

    fn study_from_fn(
        dims: (usize, usize, usize),
        bvalues: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) -> DwiStudy {
        let n = dims.0 * dims.1 * dims.2;
        let pairs = bvalues
            .iter()
            .map(|&b| {
                let data: Vec<f64> = (0..n).map(|i| f(i, b)).collect();
                (b, Volume3D::new(dims, (1.0, 1.0, 1.0), data).unwrap())
            })
            .collect();
        DwiStudy::new(pairs).unwrap()
    }

    #[test]
    fn single_bvalue_identity_mixing() {
        let study = study_from_fn((3, 2, 2), &[800.0], |i, _| 0.5 + i as f64);
        let config = MixingConfig {
            native_bvalues: vec![800.0],
            synthetic_bvalues: vec![],
            coefficients: vec![(800.0, 1.0)],
            epsilon: 1e-9,
        };
        let out = compute_cdis(&study, &config).unwrap();
        for (o, s) in out.data().iter().zip(study.volume_for(800.0).unwrap().data()) {
            assert!((o - s).abs() <= 1e-12 * s.abs().max(1e-300), "{o} vs {s}");
        }
        // Synthesis from a single native b-value is rejected (no slope).
        let config = MixingConfig::uniform(&[800.0], &[1000.0], 1e-9);
        assert!(matches!(
            compute_cdis(&study, &config),
            Err(CoreError::TooFewBValues { .. })
        ));
    }

    #[test]
    fn constant_signal_is_a_fixed_point() {
        let c = 3.25;
        let study = study_from_fn((4, 4, 1), &B_SET, |_, _| c);
        let config = MixingConfig::uniform(&B_SET, &SYNTH, 1e-9);
        assert!((config.rho_sum() - 1.0).abs() < 1e-12);
        let out = compute_cdis(&study, &config).unwrap();
        for o in out.data() {
            assert!((o - c).abs() <= 1e-12 * c);
        }
    }

    #[test]
    fn matches_scalar_per_voxel_oracle() {
        // 2x2x1 grid with planted S0/ADC per voxel; independent scalar oracle.
        let s0 = [1.0, 2.0, 0.5, 4.0];
        let adc = [0.0005, 0.001, 0.002, 0.0015];
        let study = study_from_fn((2, 2, 1), &B_SET, |i, b| s0[i] * (-adc[i] * b).exp());
        let eps = 1e-9;
        let config = MixingConfig::uniform(&B_SET, &SYNTH, eps);
        let out = compute_cdis(&study, &config).unwrap();

        let all_b: Vec<f64> = B_SET.iter().chain(SYNTH.iter()).copied().collect();
        let rho = 1.0 / all_b.len() as f64;
        for i in 0..4 {
            // The oracle multiplies plain powf factors, no log-domain trick.
            let mut product = 1.0f64;
            for &b in &all_b {
                let signal = s0[i] * (-adc[i] * b).exp();
                product *= signal.max(eps).powf(rho);
            }
            assert!(
                (out.data()[i] - product).abs() <= 1e-10 * product,
                "voxel {i}: {} vs oracle {product}",
                out.data()[i]
            );
        }
    }

    #[test]
    fn scaling_equivariance_under_unit_rho_sum() {
        let study = study_from_fn((3, 3, 2), &B_SET, |i, b| {
            (1.0 + (i % 5) as f64) * (-0.001 * b).exp()
        });
        let k = 3.7;
        let scaled = study_from_fn((3, 3, 2), &B_SET, |i, b| {
            k * (1.0 + (i % 5) as f64) * (-0.001 * b).exp()
        });
        let config = MixingConfig::uniform(&B_SET, &SYNTH, 1e-12);
        let base = compute_cdis(&study, &config).unwrap();
        let out = compute_cdis(&scaled, &config).unwrap();
        for (o, b) in out.data().iter().zip(base.data()) {
            assert!((o - k * b).abs() <= 1e-9 * (k * b).abs());
        }
    }

    #[test]
    fn output_is_bounded_below_and_finite() {
        let study = study_from_fn((4, 2, 2), &B_SET, |i, _| if i % 3 == 0 { 0.0 } else { 2.0 });
        let config = MixingConfig::uniform(&B_SET, &SYNTH, 1e-6);
        let out = compute_cdis(&study, &config).unwrap();
        let floor = config.epsilon.powf(config.rho_sum());
        for o in out.data() {
            assert!(o.is_finite());
            assert!(*o >= floor * (1.0 - 1e-12));
        }
    }

    #[test]
    fn missing_coefficient_and_missing_native_are_errors() {
        let study = study_from_fn((2, 2, 1), &B_SET, |_, _| 1.0);
        let mut config = MixingConfig::uniform(&B_SET, &SYNTH, 1e-9);
        config.coefficients.pop();
        assert!(matches!(
            compute_cdis(&study, &config),
            Err(CoreError::MissingCoefficient { .. }) | Err(CoreError::InvalidMixing(_))
        ));

        let config = MixingConfig::uniform(&[0.0, 100.0, 600.0, 800.0, 900.0], &SYNTH, 1e-9);
        assert!(matches!(
            compute_cdis(&study, &config),
            Err(CoreError::NativeBValueMissing { b }) if b == 900.0
        ));
    }

    #[test]
    fn overlapping_native_and_synthetic_sets_are_rejected() {
        let config = MixingConfig::uniform(&B_SET, &[800.0, 1000.0], 1e-9);
        assert!(matches!(config.validate(), Err(CoreError::InvalidMixing(_))));
    }
}
