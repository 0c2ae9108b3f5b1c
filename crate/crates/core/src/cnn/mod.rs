//! VGG-16-family binary classifier written from scratch: 13 3×3 convolutions in
//! five blocks, 2×2 max-pools, two hidden fully connected layers and one
//! logistic output unit, with exact backpropagation and SGD.
//!
//! Activations are NHWC and flat. Training runs in `f32`; `f64` is there for
//! finite-difference gradient checks.

pub mod layers;
mod network;
mod real;
mod train;
pub mod weights;

use thiserror::Error;

pub use network::{
    Cache, Dims, Gradients, Layer, LayerGrad, LayerKind, Network, NetworkConfig, ShapeTrace, BASE_CHANNELS,
    BLOCK_LAYOUT, HE_GAIN, OUTPUT_GAIN,
};
pub use real::Real;
pub use train::{
    extract_all_features, fine_tune, predict_probabilities, score, train_logistic_head, write_history, EpochRecord,
    FineTuneOptions, LogisticHead, Samples, TrainSpec, HISTORY_HEADER,
};

#[derive(Debug, Error)]
pub enum CnnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("activation cache is older than the parameters")]
    StaleCache,
    #[error("training or validation split is empty")]
    EmptySplit,
    #[error("cannot freeze {0} blocks; the network has 5")]
    InvalidFreezeCount(usize),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("invalid training spec: {0}")]
    InvalidSpec(String),
    #[error("weight file: {0}")]
    WeightFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
