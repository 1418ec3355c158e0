//! Declarative pipeline configuration: one TOML file plus flag overrides
//! (flags win; the cache directory also honors `CDIS_CACHE_DIR`).
//!
//! The config fingerprint hashes the semantic experiment — seed, task,
//! modalities, mixing, cube dims, network, training — and deliberately
//! excludes filesystem paths, so the same experiment replayed in another
//! directory produces byte-identical reports. Every output artifact embeds
//! the fingerprint and tool version.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cdis_eval::MixingSettings;
use cdis_net::{ClassWeight, NetworkConfig, TrainConfig};

use crate::AppError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment override for the cache directory.
pub const CACHE_ENV: &str = "CDIS_CACHE_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub task: String,
    pub modalities: Vec<String>,
    pub threshold: f64,
    pub paths: PathsConfig,
    pub mixing: MixingToml,
    pub cube: CubeToml,
    pub net: NetToml,
    pub train: TrainToml,
    pub phantom: PhantomToml,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            task: "grading".into(),
            modalities: vec!["cdis".into()],
            threshold: 0.5,
            paths: PathsConfig::default(),
            mixing: MixingToml::default(),
            cube: CubeToml::default(),
            net: NetToml::default(),
            train: TrainToml::default(),
            phantom: PhantomToml::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: PathBuf,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            manifest: "cohort/manifest.csv".into(),
            cache_dir: ".cdis-cache".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixingToml {
    /// Omit to use every b-value the study provides.
    pub native_bvalues: Option<Vec<f64>>,
    pub synthetic_bvalues: Vec<f64>,
    /// `[b, rho]` pairs; omit for uniform weights.
    pub coefficients: Option<Vec<(f64, f64)>>,
    /// Omit to derive the log floor from the data.
    pub epsilon: Option<f64>,
}

impl Default for MixingToml {
    fn default() -> Self {
        MixingToml {
            native_bvalues: None,
            synthetic_bvalues: vec![1000.0, 1500.0, 2000.0],
            coefficients: None,
            epsilon: None,
        }
    }
}

impl MixingToml {
    pub fn to_settings(&self) -> MixingSettings {
        MixingSettings {
            native_bvalues: self.native_bvalues.clone(),
            synthetic_bvalues: self.synthetic_bvalues.clone(),
            coefficients: self.coefficients.clone(),
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CubeToml {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
}

impl Default for CubeToml {
    fn default() -> Self {
        CubeToml {
            height: 224,
            width: 224,
            depth: 25,
        }
    }
}

impl CubeToml {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.depth)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetToml {
    pub stage_blocks: [usize; 4],
    pub base_width: usize,
    pub feature_dim: usize,
}

impl Default for NetToml {
    fn default() -> Self {
        NetToml {
            stage_blocks: [3, 4, 6, 3],
            base_width: 64,
            feature_dim: 512,
        }
    }
}

impl NetToml {
    pub fn to_network(&self, in_channels: usize, seed: u64) -> NetworkConfig {
        NetworkConfig {
            in_channels,
            stage_blocks: self.stage_blocks,
            base_width: self.base_width,
            feature_dim: self.feature_dim,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainToml {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub class_weight: String,
    pub momentum: f64,
}

impl Default for TrainToml {
    fn default() -> Self {
        TrainToml {
            epochs: 30,
            batch_size: 4,
            learning_rate: 0.01,
            class_weight: "balanced".into(),
            momentum: 0.9,
        }
    }
}

impl TrainToml {
    pub fn to_train(&self, seed: u64) -> Result<TrainConfig, AppError> {
        let class_weight = match self.class_weight.to_ascii_lowercase().as_str() {
            "balanced" => ClassWeight::Balanced,
            "none" => ClassWeight::None,
            other => {
                return Err(AppError::Data(format!(
                    "unknown class_weight {other:?} (expected balanced|none)"
                )))
            }
        };
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            class_weight,
            momentum: self.momentum,
            seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomToml {
    pub n_patients: usize,
    pub grid: [usize; 3],
    pub native_bvalues: Vec<f64>,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub tissue_s0: f64,
    pub lesion_s0: f64,
    pub tissue_adc: f64,
    pub lesion_adc_negative: f64,
    pub lesion_adc_jitter: f64,
}

impl Default for PhantomToml {
    fn default() -> Self {
        let d = cdis_core::PhantomSpec::default();
        PhantomToml {
            n_patients: d.n_patients,
            grid: [d.grid.0, d.grid.1, d.grid.2],
            native_bvalues: d.native_bvalues,
            class_separation: d.class_separation,
            noise_sigma: d.noise_sigma,
            tissue_s0: d.tissue_s0,
            lesion_s0: d.lesion_s0,
            tissue_adc: d.tissue_adc,
            lesion_adc_negative: d.lesion_adc_negative,
            lesion_adc_jitter: d.lesion_adc_jitter,
        }
    }
}

impl PhantomToml {
    pub fn to_spec(&self, seed: u64) -> cdis_core::PhantomSpec {
        cdis_core::PhantomSpec {
            n_patients: self.n_patients,
            grid: (self.grid[0], self.grid[1], self.grid[2]),
            native_bvalues: self.native_bvalues.clone(),
            class_separation: self.class_separation,
            noise_sigma: self.noise_sigma,
            seed,
            tissue_s0: self.tissue_s0,
            lesion_s0: self.lesion_s0,
            tissue_adc: self.tissue_adc,
            lesion_adc_negative: self.lesion_adc_negative,
            lesion_adc_jitter: self.lesion_adc_jitter,
        }
    }
}

impl PipelineConfig {
    /// Loads the file when given, otherwise starts from defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, AppError> {
        match path {
            None => Ok(PipelineConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| AppError::Data(format!("{}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| AppError::Data(format!("{}: {e}", p.display())))
            }
        }
    }

    /// The semantic-experiment fingerprint (paths excluded).
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            seed: u64,
            task: &'a str,
            modalities: &'a [String],
            threshold: f64,
            mixing: &'a MixingToml,
            cube: &'a CubeToml,
            net: &'a NetToml,
            train: &'a TrainToml,
        }
        let view = View {
            seed: self.seed,
            task: &self.task,
            modalities: &self.modalities,
            threshold: self.threshold,
            mixing: &self.mixing,
            cube: &self.cube,
            net: &self.net,
            train: &self.train,
        };
        let json = serde_json::to_vec(&view).expect("config serializes");
        let digest = Sha256::digest(&json);
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    pub fn task(&self) -> Result<cdis_core::Task, AppError> {
        self.task
            .parse::<cdis_core::Task>()
            .map_err(AppError::Usage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_ignores_paths_but_not_semantics() {
        let a = PipelineConfig::default();
        let mut b = PipelineConfig::default();
        b.paths.output_dir = "/somewhere/else".into();
        assert_eq!(a.fingerprint(), b.fingerprint());

        let mut c = PipelineConfig::default();
        c.seed = 99;
        assert_ne!(a.fingerprint(), c.fingerprint());
        let mut d = PipelineConfig::default();
        d.train.epochs += 1;
        assert_ne!(a.fingerprint(), d.fingerprint());
    }

    #[test]
    fn toml_roundtrip_with_partial_file() {
        let text = r#"
            seed = 7
            task = "pcr"
            modalities = ["cdis", "dwi-b800"]

            [cube]
            height = 16
            width = 16
            depth = 5

            [train]
            epochs = 3
        "#;
        let cfg: PipelineConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.cube.dims(), (16, 16, 5));
        assert_eq!(cfg.train.epochs, 3);
        // untouched sections keep defaults
        assert_eq!(cfg.net.stage_blocks, [3, 4, 6, 3]);
        assert_eq!(cfg.paths.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let res: Result<PipelineConfig, _> = toml::from_str("nonsense = 1");
        assert!(res.is_err());
    }
}
