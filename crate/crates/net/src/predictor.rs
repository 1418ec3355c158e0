//! The fully-connected predictor head: one linear layer + sigmoid.
//!
//! This is the canonical residual network's fc layer, producing the positive
//! class probability from the pooled feature vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Mixes the seed stream away from the extractor's.
const PREDICTOR_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn build_predictor(feature_dim: usize, seed: u64) -> Predictor {
    assert!(feature_dim >= 1, "feature_dim must be >= 1");
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ PREDICTOR_SEED_SALT);
    let std = 1.0 / (feature_dim as f64).sqrt();
    Predictor {
        weights: (0..feature_dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect(),
        bias: 0.0,
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross-entropy from the logit.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

impl Predictor {
    pub fn feature_dim(&self) -> usize {
        self.weights.len()
    }

    pub fn logit(&self, features: &[f64]) -> f64 {
        debug_assert_eq!(features.len(), self.weights.len());
        self.weights
            .iter()
            .zip(features)
            .map(|(w, f)| w * f)
            .sum::<f64>()
            + self.bias
    }

    /// Positive-class probability in [0, 1].
    pub fn probability(&self, features: &[f64]) -> f64 {
        sigmoid(self.logit(features))
    }

    /// Thresholded label (boundary inclusive) plus the probability.
    pub fn predict(&self, features: &[f64], threshold: f64) -> (bool, f64) {
        let p = self.probability(features);
        (p >= threshold, p)
    }
}

#[derive(Debug, Clone)]
pub struct PredictorGrads {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl PredictorGrads {
    pub fn zeros(feature_dim: usize) -> Self {
        PredictorGrads {
            weights: vec![0.0; feature_dim],
            bias: 0.0,
        }
    }

    pub fn axpy(&mut self, other: &PredictorGrads, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += scale * b;
        }
        self.bias += scale * other.bias;
    }
}
