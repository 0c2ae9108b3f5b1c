//! Whole-slide image tiling, H&E stain normalization and VGG-style binary tile
//! classification (squamous cell carcinoma vs adenocarcinoma).
//!
//! The pipeline runs slide → tiles → tissue filter → stain normalization →
//! stratified split → feature extraction and fine-tuning → evaluation. Each stage
//! lives in its own module; [`pipeline`] chains them over files on disk.

pub mod cnn;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod stain;
pub mod synth;
pub mod tiler;
pub mod tissue;
pub mod wsi;
