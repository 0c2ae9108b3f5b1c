//! Whole-slide image access.
//!
//! Slides are tiled pyramidal TIFF or BigTIFF files (8-bit RGB, uncompressed or
//! deflate tiles) or, as a fallback, a single binary `P6` pixmap treated as a
//! one-level pyramid. [`SlidePyramid`] is immutable once opened and
//! [`SlidePyramid::read_region`] may be called concurrently.

mod tiff;
pub mod writer;

use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::raster::{self, RgbImage};
pub use tiff::{parse_header, ByteSource, Endianness, FileSource, TiffHeader};
use tiff::*;

/// Upper bound on a single decoded tile; guards allocations driven by corrupt headers.
const MAX_TILE_BYTES: u64 = 256 << 20;

#[derive(Debug, Error)]
pub enum WsiError {
    #[error("unknown byte-order mark")]
    UnknownMagic,
    #[error("unsupported TIFF version word {0}")]
    UnsupportedVersion(u16),
    #[error("file is truncated")]
    Truncated,
    #[error("parse error: {0}")]
    Parse(String),
    #[error("no supported tiled RGB level in slide")]
    NoSupportedLevels,
    #[error("native magnification unknown; supply an override")]
    MissingMagnification,
    #[error("region {x},{y} {width}x{height} is outside level {level}")]
    OutOfBounds {
        level: usize,
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("unsupported compression scheme {0}")]
    UnsupportedCompression(u16),
    #[error("tile decode failed: {0}")]
    Decode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compression {
    None,
    Deflate,
}

impl Compression {
    pub fn from_code(code: u16) -> Result<Self, WsiError> {
        match code {
            1 => Ok(Compression::None),
            // 32946 is the pre-standard code for the same zlib stream
            8 | 32946 => Ok(Compression::Deflate),
            other => Err(WsiError::UnsupportedCompression(other)),
        }
    }

    pub fn code(self) -> u16 {
        match self {
            Compression::None => 1,
            Compression::Deflate => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelInfo {
    pub index: usize,
    pub width_px: usize,
    pub height_px: usize,
    /// Zero for the raster fallback, which is not tile-organized.
    pub tile_width_px: usize,
    pub tile_height_px: usize,
    pub compression: Compression,
    pub bits_per_sample: u16,
    pub samples_per_pixel: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub level: usize,
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Region {
    pub fn into_image(self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels,
        }
    }
}

struct TiledLevel {
    offsets: Vec<u64>,
    byte_counts: Vec<u64>,
    tiles_across: usize,
}

enum Backend {
    Tiff {
        source: Arc<dyn ByteSource>,
        levels: Vec<TiledLevel>,
    },
    Raster(Arc<RgbImage>),
}

pub struct SlidePyramid {
    pub slide_id: String,
    /// Ordered by strictly decreasing width.
    pub levels: Vec<LevelInfo>,
    pub native_magnification: f64,
    pub source_path: String,
    backend: Backend,
}

impl std::fmt::Debug for SlidePyramid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SlidePyramid")
            .field("slide_id", &self.slide_id)
            .field("levels", &self.levels)
            .field("native_magnification", &self.native_magnification)
            .field("source_path", &self.source_path)
            .finish_non_exhaustive()
    }
}

/// Parses the number following the first `AppMag = ` token (whitespace-tolerant
/// around `=`), as written by Aperio scanners into ImageDescription.
pub fn extract_magnification(image_description: &str) -> Result<f64, WsiError> {
    let start = image_description
        .find("AppMag")
        .ok_or(WsiError::MissingMagnification)?;
    let rest = image_description[start + "AppMag".len()..].trim_start();
    let rest = rest
        .strip_prefix('=')
        .ok_or(WsiError::MissingMagnification)?
        .trim_start();
    let end = rest
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(rest.len());
    match rest[..end].parse::<f64>() {
        Ok(mag) if mag > 0.0 && mag.is_finite() => Ok(mag),
        _ => Err(WsiError::MissingMagnification),
    }
}

/// Opens a slide file. `magnification` overrides any value found in metadata.
pub fn open_slide(path: &Path, magnification: Option<f64>) -> Result<SlidePyramid, WsiError> {
    let file = std::fs::File::open(path)?;
    let source = FileSource::new(file)?;
    let slide_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut head = vec![0u8; source.len().min(16) as usize];
    source.read_exact_at(0, &mut head)?;
    let source_path = path.display().to_string();
    if raster::is_ppm(&head) {
        let bytes = std::fs::read(path)?;
        return open_raster(&bytes, slide_id, source_path, magnification);
    }
    open_tiff(Arc::new(source), &head, slide_id, source_path, magnification)
}

/// Opens a slide held in memory.
pub fn open_slide_bytes(
    bytes: Vec<u8>,
    slide_id: &str,
    magnification: Option<f64>,
) -> Result<SlidePyramid, WsiError> {
    if raster::is_ppm(&bytes) {
        return open_raster(&bytes, slide_id.to_string(), String::new(), magnification);
    }
    let head = bytes[..bytes.len().min(16)].to_vec();
    open_tiff(
        Arc::new(bytes),
        &head,
        slide_id.to_string(),
        String::new(),
        magnification,
    )
}

fn open_raster(
    bytes: &[u8],
    slide_id: String,
    source_path: String,
    magnification: Option<f64>,
) -> Result<SlidePyramid, WsiError> {
    let image = raster::decode_ppm(bytes).map_err(|e| WsiError::Parse(e.to_string()))?;
    if image.is_empty() {
        return Err(WsiError::NoSupportedLevels);
    }
    let native_magnification = valid_override(magnification)?.ok_or(WsiError::MissingMagnification)?;
    Ok(SlidePyramid {
        slide_id,
        levels: vec![LevelInfo {
            index: 0,
            width_px: image.width,
            height_px: image.height,
            tile_width_px: 0,
            tile_height_px: 0,
            compression: Compression::None,
            bits_per_sample: 8,
            samples_per_pixel: 3,
        }],
        native_magnification,
        source_path,
        backend: Backend::Raster(Arc::new(image)),
    })
}

fn valid_override(magnification: Option<f64>) -> Result<Option<f64>, WsiError> {
    match magnification {
        Some(m) if !(m > 0.0 && m.is_finite()) => {
            Err(WsiError::Parse(format!("invalid magnification override {m}")))
        }
        other => Ok(other),
    }
}

fn open_tiff(
    source: Arc<dyn ByteSource>,
    head: &[u8],
    slide_id: String,
    source_path: String,
    magnification: Option<f64>,
) -> Result<SlidePyramid, WsiError> {
    let header = parse_header(head)?;
    let directories = read_directories(source.as_ref(), &header)?;
    let description = directories
        .first()
        .and_then(|d| d.ascii(TAG_IMAGE_DESCRIPTION))
        .unwrap_or_default();

    let mut found = Vec::new();
    for dir in &directories {
        match tiled_level(dir, source.len()) {
            Ok(Some(level)) => found.push(level),
            Ok(None) => log::debug!("{slide_id}: skipping unsupported directory at {}", dir.offset),
            Err(e) => return Err(e),
        }
    }
    found.sort_by_key(|f| std::cmp::Reverse(f.0.width_px));
    found.dedup_by(|a, b| a.0.width_px == b.0.width_px);
    if found.is_empty() {
        return Err(WsiError::NoSupportedLevels);
    }

    let native_magnification = match valid_override(magnification)? {
        Some(m) => m,
        None => extract_magnification(&description)?,
    };
    let (levels, tiled) = found
        .into_iter()
        .enumerate()
        .map(|(index, (mut info, tiled))| {
            info.index = index;
            (info, tiled)
        })
        .unzip();
    Ok(SlidePyramid {
        slide_id,
        levels,
        native_magnification,
        source_path,
        backend: Backend::Tiff {
            source,
            levels: tiled,
        },
    })
}

/// Interprets a directory as a pyramid level. `Ok(None)` marks directories that are
/// well-formed but outside the supported subset (strips, JPEG, non-RGB, ...).
fn tiled_level(dir: &Directory, file_len: u64) -> Result<Option<(LevelInfo, TiledLevel)>, WsiError> {
    let (Some(width), Some(height)) = (dir.uint(TAG_IMAGE_WIDTH)?, dir.uint(TAG_IMAGE_LENGTH)?) else {
        return Err(WsiError::Parse("directory without image dimensions".into()));
    };
    let (Some(tile_w), Some(tile_h)) = (dir.uint(TAG_TILE_WIDTH)?, dir.uint(TAG_TILE_LENGTH)?) else {
        return Ok(None);
    };
    let samples = dir.uint(TAG_SAMPLES_PER_PIXEL)?.unwrap_or(1);
    let bits = dir.uints(TAG_BITS_PER_SAMPLE)?.unwrap_or_else(|| vec![1]);
    let compression = dir.uint(TAG_COMPRESSION)?.unwrap_or(1);
    let planar = dir.uint(TAG_PLANAR_CONFIGURATION)?.unwrap_or(1);
    let predictor = dir.uint(TAG_PREDICTOR)?.unwrap_or(1);
    let photometric = dir.uint(TAG_PHOTOMETRIC)?.unwrap_or(2);
    if samples != 3 || bits.iter().any(|&b| b != 8) || planar != 1 || predictor != 1 || photometric != 2 {
        return Ok(None);
    }
    let Ok(compression) = u16::try_from(compression)
        .map_err(|_| WsiError::UnsupportedCompression(u16::MAX))
        .and_then(Compression::from_code)
    else {
        return Ok(None);
    };
    if width == 0 || height == 0 {
        return Err(WsiError::Parse("zero image dimension".into()));
    }
    if tile_w == 0 || tile_h == 0 || tile_w % 16 != 0 || tile_h % 16 != 0 {
        return Err(WsiError::Parse(format!("invalid tile size {tile_w}x{tile_h}")));
    }
    if tile_w
        .checked_mul(tile_h)
        .and_then(|n| n.checked_mul(3))
        .is_none_or(|n| n > MAX_TILE_BYTES)
    {
        return Err(WsiError::Parse(format!("tile size {tile_w}x{tile_h} too large")));
    }
    let across = width.div_ceil(tile_w);
    let down = height.div_ceil(tile_h);
    let expected = across.checked_mul(down).ok_or(WsiError::Truncated)?;
    let offsets = dir
        .uints(TAG_TILE_OFFSETS)?
        .ok_or_else(|| WsiError::Parse("missing TileOffsets".into()))?;
    let byte_counts = dir
        .uints(TAG_TILE_BYTE_COUNTS)?
        .ok_or_else(|| WsiError::Parse("missing TileByteCounts".into()))?;
    if offsets.len() as u64 != expected || byte_counts.len() as u64 != expected {
        return Err(WsiError::Parse(format!(
            "expected {expected} tiles, found {} offsets and {} byte counts",
            offsets.len(),
            byte_counts.len()
        )));
    }
    for (&off, &count) in offsets.iter().zip(&byte_counts) {
        if off.checked_add(count).is_none_or(|end| end > file_len) {
            return Err(WsiError::Truncated);
        }
    }
    let to_usize = |v: u64| usize::try_from(v).map_err(|_| WsiError::Parse("dimension overflow".into()));
    let info = LevelInfo {
        index: 0,
        width_px: to_usize(width)?,
        height_px: to_usize(height)?,
        tile_width_px: to_usize(tile_w)?,
        tile_height_px: to_usize(tile_h)?,
        compression,
        bits_per_sample: 8,
        samples_per_pixel: 3,
    };
    Ok(Some((
        info,
        TiledLevel {
            offsets,
            byte_counts,
            tiles_across: to_usize(across)?,
        },
    )))
}

impl SlidePyramid {
    /// Magnification of a stored level: native × level width / level-0 width.
    pub fn level_magnification(&self, level: usize) -> f64 {
        self.native_magnification * self.levels[level].width_px as f64 / self.levels[0].width_px as f64
    }

    pub fn read_region(
        &self,
        level: usize,
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    ) -> Result<Region, WsiError> {
        let out_of_bounds = WsiError::OutOfBounds {
            level,
            x,
            y,
            width,
            height,
        };
        let Some(info) = self.levels.get(level) else {
            return Err(out_of_bounds);
        };
        let inside = |start: usize, len: usize, limit: usize| {
            len > 0 && start.checked_add(len).is_some_and(|end| end <= limit)
        };
        if !inside(x, width, info.width_px) || !inside(y, height, info.height_px) {
            return Err(out_of_bounds);
        }
        let pixels = match &self.backend {
            Backend::Raster(image) => image.crop(x, y, width, height).pixels,
            Backend::Tiff { source, levels } => {
                read_tiled(source.as_ref(), info, &levels[level], x, y, width, height)?
            }
        };
        Ok(Region {
            level,
            x,
            y,
            width,
            height,
            pixels,
        })
    }
}

pub fn read_region(
    slide: &SlidePyramid,
    level: usize,
    x: usize,
    y: usize,
    width: usize,
    height: usize,
) -> Result<Region, WsiError> {
    slide.read_region(level, x, y, width, height)
}

fn read_tiled(
    source: &dyn ByteSource,
    info: &LevelInfo,
    tiled: &TiledLevel,
    x: usize,
    y: usize,
    width: usize,
    height: usize,
) -> Result<Vec<u8>, WsiError> {
    let (tw, th) = (info.tile_width_px, info.tile_height_px);
    let mut out = vec![0u8; width * height * 3];
    for ty in y / th..=(y + height - 1) / th {
        for tx in x / tw..=(x + width - 1) / tw {
            let index = ty * tiled.tiles_across + tx;
            let tile = decode_tile(
                source,
                info.compression,
                tiled.offsets[index],
                tiled.byte_counts[index],
                tw * th * 3,
            )?;
            // intersection of this tile with the request, in level coordinates
            let x0 = (tx * tw).max(x);
            let x1 = ((tx + 1) * tw).min(x + width);
            let y0 = (ty * th).max(y);
            let y1 = ((ty + 1) * th).min(y + height);
            let run = (x1 - x0) * 3;
            for row in y0..y1 {
                let src = ((row - ty * th) * tw + (x0 - tx * tw)) * 3;
                let dst = ((row - y) * width + (x0 - x)) * 3;
                out[dst..dst + run].copy_from_slice(&tile[src..src + run]);
            }
        }
    }
    Ok(out)
}

fn decode_tile(
    source: &dyn ByteSource,
    compression: Compression,
    offset: u64,
    byte_count: u64,
    expected: usize,
) -> Result<Vec<u8>, WsiError> {
    let raw = read_range(source, offset, byte_count)?;
    let decoded = match compression {
        Compression::None => raw,
        Compression::Deflate => {
            let mut decoded = Vec::with_capacity(expected);
            flate2::read::ZlibDecoder::new(raw.as_slice())
                .take(expected as u64)
                .read_to_end(&mut decoded)
                .map_err(|e| WsiError::Decode(e.to_string()))?;
            decoded
        }
    };
    if decoded.len() < expected {
        return Err(WsiError::Decode(format!(
            "tile holds {} bytes, expected {expected}",
            decoded.len()
        )));
    }
    Ok(decoded)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn magnification_from_aperio_description() {
        let desc = "Aperio Image Library v11.2.1 \r\n46000x32914 [0,100 46000x32814] (256x256) JPEG/RGB Q=30|AppMag = 40|StripeWidth = 2032|MPP = 0.2498";
        assert_eq!(extract_magnification(desc).unwrap(), 40.0);
        assert_eq!(extract_magnification("AppMag = 20.0").unwrap(), 20.0);
        assert_eq!(extract_magnification("AppMag=2.5|x").unwrap(), 2.5);
        assert!(matches!(
            extract_magnification("no such token"),
            Err(WsiError::MissingMagnification)
        ));
        assert!(matches!(
            extract_magnification("AppMag = 0"),
            Err(WsiError::MissingMagnification)
        ));
    }

    #[test]
    fn empty_bytes_are_truncated() {
        assert!(matches!(
            open_slide_bytes(Vec::new(), "empty", Some(20.0)),
            Err(WsiError::Truncated)
        ));
    }

    #[test]
    fn raster_fallback_needs_magnification() {
        let img = RgbImage::filled(8, 4, [10, 20, 30]);
        let bytes = raster::encode_ppm(&img);
        assert!(matches!(
            open_slide_bytes(bytes.clone(), "r", None),
            Err(WsiError::MissingMagnification)
        ));
        let slide = open_slide_bytes(bytes, "r", Some(20.0)).unwrap();
        assert_eq!(slide.levels.len(), 1);
        assert_eq!(slide.native_magnification, 20.0);
        let region = slide.read_region(0, 2, 1, 3, 2).unwrap();
        assert_eq!(region.pixels, img.crop(2, 1, 3, 2).pixels);
        assert!(slide.read_region(0, 6, 0, 3, 1).is_err());
        assert!(slide.read_region(0, 0, 0, 0, 1).is_err());
    }
}
