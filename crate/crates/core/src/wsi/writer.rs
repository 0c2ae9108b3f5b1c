//! Minimal tiled TIFF / BigTIFF writer.
//!
//! Produces exactly the subset the reader accepts: one directory per pyramid
//! level, 8-bit chunky RGB, uncompressed or deflate tiles. Used to build test
//! fixtures and the synthetic slide sets.

use std::io::Write;
use std::path::Path;

use flate2::write::ZlibEncoder;

use super::tiff::*;
use super::{Compression, WsiError};
use crate::raster::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TiffWriteOptions {
    pub endianness: Endianness,
    pub bigtiff: bool,
    pub compression: Compression,
    pub tile_size: usize,
}

impl Default for TiffWriteOptions {
    fn default() -> Self {
        Self {
            endianness: Endianness::Little,
            bigtiff: false,
            compression: Compression::Deflate,
            tile_size: 256,
        }
    }
}

struct Field {
    tag: u16,
    field_type: u16,
    count: u64,
    data: Vec<u8>,
}

/// Serializes `levels` (largest first) into one pyramid file. `description` is
/// stored as ImageDescription on every directory.
pub fn encode_pyramid(
    levels: &[RgbImage],
    description: &str,
    opts: &TiffWriteOptions,
) -> Result<Vec<u8>, WsiError> {
    let e = opts.endianness;
    let ts = opts.tile_size;
    if ts == 0 || !ts.is_multiple_of(16) {
        return Err(WsiError::Parse(format!("tile size {ts} is not a positive multiple of 16")));
    }
    let mut out = Vec::new();
    out.extend_from_slice(match e {
        Endianness::Little => b"II",
        Endianness::Big => b"MM",
    });
    let first_ifd_slot;
    if opts.bigtiff {
        e.put_u16(&mut out, 43);
        e.put_u16(&mut out, 8);
        e.put_u16(&mut out, 0);
        first_ifd_slot = out.len();
        e.put_u64(&mut out, 0);
    } else {
        e.put_u16(&mut out, 42);
        first_ifd_slot = out.len();
        e.put_u32(&mut out, 0);
    }

    // tile payloads first, directories after
    let mut tile_tables = Vec::with_capacity(levels.len());
    for level in levels {
        let mut offsets = Vec::new();
        let mut counts = Vec::new();
        for ty in 0..level.height.div_ceil(ts) {
            for tx in 0..level.width.div_ceil(ts) {
                let raw = padded_tile(level, tx * ts, ty * ts, ts);
                let payload = match opts.compression {
                    Compression::None => raw,
                    Compression::Deflate => {
                        let mut enc = ZlibEncoder::new(Vec::new(), flate2::Compression::fast());
                        enc.write_all(&raw)?;
                        enc.finish()?
                    }
                };
                offsets.push(out.len() as u64);
                counts.push(payload.len() as u64);
                out.extend_from_slice(&payload);
            }
        }
        tile_tables.push((offsets, counts));
    }

    let mut prev_next_slot = first_ifd_slot;
    for (level, (offsets, counts)) in levels.iter().zip(tile_tables) {
        if out.len() % 2 == 1 {
            out.push(0);
        }
        let ifd_offset = out.len() as u64;
        patch_offset(&mut out, prev_next_slot, ifd_offset, opts)?;
        let mut desc = description.as_bytes().to_vec();
        desc.push(0);
        let offset_type = if opts.bigtiff { TYPE_LONG8 } else { TYPE_LONG };
        let mut fields = vec![
            uint_field(e, TAG_IMAGE_WIDTH, TYPE_LONG, &[level.width as u64]),
            uint_field(e, TAG_IMAGE_LENGTH, TYPE_LONG, &[level.height as u64]),
            uint_field(e, TAG_BITS_PER_SAMPLE, TYPE_SHORT, &[8, 8, 8]),
            uint_field(e, TAG_COMPRESSION, TYPE_SHORT, &[u64::from(opts.compression.code())]),
            uint_field(e, TAG_PHOTOMETRIC, TYPE_SHORT, &[2]),
            Field {
                tag: TAG_IMAGE_DESCRIPTION,
                field_type: TYPE_ASCII,
                count: desc.len() as u64,
                data: desc,
            },
            uint_field(e, TAG_SAMPLES_PER_PIXEL, TYPE_SHORT, &[3]),
            uint_field(e, TAG_PLANAR_CONFIGURATION, TYPE_SHORT, &[1]),
            uint_field(e, TAG_TILE_WIDTH, TYPE_LONG, &[ts as u64]),
            uint_field(e, TAG_TILE_LENGTH, TYPE_LONG, &[ts as u64]),
            uint_field(e, TAG_TILE_OFFSETS, offset_type, &offsets),
            uint_field(e, TAG_TILE_BYTE_COUNTS, offset_type, &counts),
        ];
        fields.sort_by_key(|f| f.tag);
        prev_next_slot = write_directory(&mut out, &fields, opts)?;
    }
    Ok(out)
}

pub fn write_pyramid(
    path: &Path,
    levels: &[RgbImage],
    description: &str,
    opts: &TiffWriteOptions,
) -> Result<(), WsiError> {
    let bytes = encode_pyramid(levels, description, opts)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Tile-sized copy of the image at (x, y); pixels past the image edge are zero.
fn padded_tile(image: &RgbImage, x: usize, y: usize, ts: usize) -> Vec<u8> {
    let mut tile = vec![0u8; ts * ts * 3];
    let w = ts.min(image.width - x);
    for row in 0..ts.min(image.height - y) {
        let src = ((y + row) * image.width + x) * 3;
        tile[row * ts * 3..row * ts * 3 + w * 3].copy_from_slice(&image.pixels[src..src + w * 3]);
    }
    tile
}

fn uint_field(e: Endianness, tag: u16, field_type: u16, values: &[u64]) -> Field {
    let mut data = Vec::new();
    for &v in values {
        match field_type {
            TYPE_SHORT => e.put_u16(&mut data, v as u16),
            TYPE_LONG => e.put_u32(&mut data, v as u32),
            _ => e.put_u64(&mut data, v),
        }
    }
    Field {
        tag,
        field_type,
        count: values.len() as u64,
        data,
    }
}

fn patch_offset(out: &mut [u8], slot: usize, value: u64, opts: &TiffWriteOptions) -> Result<(), WsiError> {
    let mut bytes = Vec::new();
    if opts.bigtiff {
        opts.endianness.put_u64(&mut bytes, value);
    } else {
        let v = u32::try_from(value).map_err(|_| WsiError::Parse("classic TIFF exceeds 4 GiB".into()))?;
        opts.endianness.put_u32(&mut bytes, v);
    }
    out[slot..slot + bytes.len()].copy_from_slice(&bytes);
    Ok(())
}

/// Appends a directory with its out-of-line values; returns the position of its
/// next-directory slot.
fn write_directory(out: &mut Vec<u8>, fields: &[Field], opts: &TiffWriteOptions) -> Result<usize, WsiError> {
    let e = opts.endianness;
    let (count_size, entry_size, slot_size) = if opts.bigtiff { (8, 20, 8) } else { (2, 12, 4) };
    let dir_start = out.len();
    let mut external = dir_start + count_size + fields.len() * entry_size + slot_size;
    let mut tail = Vec::new();
    if opts.bigtiff {
        e.put_u64(out, fields.len() as u64);
    } else {
        e.put_u16(out, fields.len() as u16);
    }
    for f in fields {
        e.put_u16(out, f.tag);
        e.put_u16(out, f.field_type);
        if opts.bigtiff {
            e.put_u64(out, f.count);
        } else {
            e.put_u32(out, f.count as u32);
        }
        if f.data.len() <= slot_size {
            let mut slot = f.data.clone();
            slot.resize(slot_size, 0);
            out.extend_from_slice(&slot);
        } else {
            let slot = out.len();
            out.resize(slot + slot_size, 0);
            patch_offset(out, slot, external as u64, opts)?;
            tail.extend_from_slice(&f.data);
            if tail.len() % 2 == 1 {
                tail.push(0);
            }
            external = dir_start + count_size + fields.len() * entry_size + slot_size + tail.len();
        }
    }
    let next_slot = out.len();
    out.resize(next_slot + slot_size, 0);
    out.extend_from_slice(&tail);
    Ok(next_slot)
}

/// Successive 2× box-filter reductions of `base`, largest first, stopping after
/// `count` levels or when a dimension would drop below one pixel.
pub fn pyramid_levels(base: &RgbImage, count: usize) -> Vec<RgbImage> {
    let mut levels = vec![base.clone()];
    while levels.len() < count {
        let prev = levels.last().unwrap();
        let (w, h) = (prev.width / 2, prev.height / 2);
        if w == 0 || h == 0 {
            break;
        }
        let mut next = RgbImage::filled(w, h, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                let mut px = [0u8; 3];
                for (c, out) in px.iter_mut().enumerate() {
                    let sum: u32 = [(0, 0), (1, 0), (0, 1), (1, 1)]
                        .iter()
                        .map(|(dx, dy)| u32::from(prev.pixel(2 * x + dx, 2 * y + dy)[c]))
                        .sum();
                    *out = ((sum + 2) / 4) as u8;
                }
                next.put_pixel(x, y, px);
            }
        }
        levels.push(next);
    }
    levels
}
