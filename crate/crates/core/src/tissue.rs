//! Background detection and tissue fraction.
//!
//! A pixel is background when all three channels are at or above the white
//! threshold, i.e. `min(R, G, B) >= threshold`. Pale eosin keeps at least one
//! channel below the threshold and therefore counts as tissue.

use thiserror::Error;

pub const DEFAULT_WHITE_THRESHOLD: u8 = 220;
pub const DEFAULT_MIN_TISSUE: f64 = 0.90;

#[derive(Debug, Error, PartialEq)]
pub enum TissueError {
    #[error("tile has no pixels")]
    EmptyTile,
    #[error("minimum tissue fraction {0} outside [0, 1]")]
    InvalidMinTissue(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelClass {
    Tissue,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TissueStats {
    pub tissue_fraction: f64,
    pub mean_rgb: [f64; 3],
    pub is_full_white: bool,
}

pub fn classify_pixel(rgb: [u8; 3], white_threshold: u8) -> PixelClass {
    if rgb.iter().min().copied().unwrap_or(0) >= white_threshold {
        PixelClass::Background
    } else {
        PixelClass::Tissue
    }
}

pub fn tile_stats(pixels: &[u8], white_threshold: u8) -> Result<TissueStats, TissueError> {
    if pixels.len() < 3 {
        return Err(TissueError::EmptyTile);
    }
    let mut tissue = 0usize;
    let mut sums = [0u64; 3];
    let mut total = 0usize;
    for px in pixels.chunks_exact(3) {
        let rgb = [px[0], px[1], px[2]];
        if classify_pixel(rgb, white_threshold) == PixelClass::Tissue {
            tissue += 1;
        }
        for c in 0..3 {
            sums[c] += u64::from(rgb[c]);
        }
        total += 1;
    }
    Ok(TissueStats {
        tissue_fraction: tissue as f64 / total as f64,
        mean_rgb: sums.map(|s| s as f64 / total as f64),
        is_full_white: tissue == 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    FullWhite,
    LowTissue,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::FullWhite => "full_white",
            RejectReason::LowTissue => "low_tissue",
        }
    }
}

/// Inclusive threshold: a tile with exactly `min_tissue` is kept.
pub fn keep_decision(stats: &TissueStats, min_tissue: f64) -> Result<(), RejectReason> {
    if stats.is_full_white {
        Err(RejectReason::FullWhite)
    } else if stats.tissue_fraction >= min_tissue {
        Ok(())
    } else {
        Err(RejectReason::LowTissue)
    }
}

/// Output of [`filter_tiles`]; each item carries its stats.
pub struct Partition<T> {
    pub kept: Vec<(T, TissueStats)>,
    pub rejected: Vec<(T, TissueStats, RejectReason)>,
}

/// Splits tiles into kept and rejected, preserving input order in both. `pixels`
/// extracts the RGB buffer of an item.
pub fn filter_tiles<T, I, F>(
    tiles: I,
    white_threshold: u8,
    min_tissue: f64,
    pixels: F,
) -> Result<Partition<T>, TissueError>
where
    I: IntoIterator<Item = T>,
    F: Fn(&T) -> &[u8],
{
    if !(0.0..=1.0).contains(&min_tissue) {
        return Err(TissueError::InvalidMinTissue(min_tissue));
    }
    let mut out = Partition {
        kept: Vec::new(),
        rejected: Vec::new(),
    };
    for tile in tiles {
        let stats = tile_stats(pixels(&tile), white_threshold)?;
        match keep_decision(&stats, min_tissue) {
            Ok(()) => out.kept.push((tile, stats)),
            Err(reason) => out.rejected.push((tile, stats, reason)),
        }
    }
    Ok(out)
}
