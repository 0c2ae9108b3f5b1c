//! Tile manifest, TCGA barcode parsing, network-input resizing and the
//! stratified train/validation/test split.

mod barcode;
mod manifest;
mod slides;
mod split;

use thiserror::Error;

use crate::raster::RgbImage;
use crate::tiler::{resize_bicubic, TilerError};
pub use barcode::{parse_tcga_slide_barcode, BarcodeFields, Preparation};
pub use manifest::{
    load_manifest, read_manifest, save_manifest, write_manifest, ClassLabel, Split, TileRecord, MANIFEST_HEADER,
};
pub use slides::{load_slide_list, read_slide_list, write_slide_list, SlideEntry, SLIDE_LIST_HEADER};
pub use split::{stratified_split, SplitCounts};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed TCGA barcode {0:?}")]
    MalformedBarcode(String),
    #[error("tile is {width}x{height}, expected a square")]
    NonSquareInput { width: usize, height: usize },
    #[error("class {class} has {available} eligible records, {needed} requested")]
    InsufficientRecords {
        class: ClassLabel,
        needed: usize,
        available: usize,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Resize(#[from] TilerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Bicubic resize of a square tile to `input_size × input_size`.
pub fn resize_to_input(tile: &RgbImage, input_size: usize) -> Result<RgbImage, DatasetError> {
    if tile.width != tile.height {
        return Err(DatasetError::NonSquareInput {
            width: tile.width,
            height: tile.height,
        });
    }
    if tile.width == input_size {
        return Ok(tile.clone());
    }
    Ok(resize_bicubic(tile, input_size, input_size)?)
}
