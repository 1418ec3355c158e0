//! Volumetric deep radiomic feature learning.
//!
//! A 34-weighted-layer residual network over 3-D data cubes (hand-written
//! forward and backward passes in f64), a fully-connected sigmoid predictor,
//! class-weighted training, and a self-describing checkpoint format. Heavy
//! kernels parallelize through `cdis_core::par` under the `parallel` feature.

pub mod checkpoint;
mod error;
pub mod ops;
pub mod predictor;
pub mod resnet;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_model, model_checksum, save_model};
pub use error::{NetError, Result};
pub use predictor::{build_predictor, Predictor, PredictorGrads};
pub use resnet::{extract_features, tensor_from_cube, Extractor, ExtractorGrads, NetworkConfig};
pub use tensor::Tensor;
pub use train::{class_weights, sample_loss_and_grads, train, ClassWeight, TrainConfig, TrainReport};
