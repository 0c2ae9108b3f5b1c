//! In-memory 8-bit RGB images and the binary portable pixmap (`P6`) format.

use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("not a binary portable pixmap: {0}")]
    Format(String),
    #[error("pixel buffer holds {actual} bytes, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major interleaved RGB, 3 bytes per pixel.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RgbImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, RasterError> {
        let expected = width * height * 3;
        if pixels.len() != expected {
            return Err(RasterError::BufferSize {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies out a sub-rectangle. Panics when the rectangle leaves the image.
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> RgbImage {
        assert!(x + width <= self.width && y + height <= self.height);
        let mut pixels = Vec::with_capacity(width * height * 3);
        for row in y..y + height {
            let start = (row * self.width + x) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + width * 3]);
        }
        RgbImage {
            width,
            height,
            pixels,
        }
    }

    /// Pastes `other` with its top-left corner at (x, y).
    pub fn blit(&mut self, other: &RgbImage, x: usize, y: usize) {
        assert!(x + other.width <= self.width && y + other.height <= self.height);
        for row in 0..other.height {
            let dst = ((y + row) * self.width + x) * 3;
            let src = row * other.width * 3;
            self.pixels[dst..dst + other.width * 3]
                .copy_from_slice(&other.pixels[src..src + other.width * 3]);
        }
    }
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<(), RasterError> {
    let mut file = io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&encode_ppm(image))?;
    file.flush()?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage, RasterError> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn is_ppm(bytes: &[u8]) -> bool {
    bytes.starts_with(b"P6")
}

/// Parses a `P6` pixmap with maxval 255. Header comments (`#` to end of line) are skipped.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, RasterError> {
    if !is_ppm(bytes) {
        return Err(RasterError::Format("missing P6 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(RasterError::Format("truncated header".into())),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos || pos - start > 9 {
            return Err(RasterError::Format("bad header number".into()));
        }
        // digits only, at most 9 of them
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| RasterError::Format("bad header number".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(RasterError::Format(format!("unsupported maxval {maxval}")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(RasterError::Format("missing separator after header".into())),
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| RasterError::Format("dimensions overflow".into()))?;
    let data = bytes
        .get(pos..)
        .filter(|rest| rest.len() >= len)
        .ok_or_else(|| RasterError::Format("truncated pixel data".into()))?;
    RgbImage::new(width, height, data[..len].to_vec())
}
