//! Low-level TIFF / BigTIFF structure: header, image file directories and tag values.
//!
//! Every read goes through [`ByteSource`] with an explicit bounds check so that a
//! corrupted offset or count yields an error instead of an out-of-range access.

use std::collections::HashSet;
use std::fs::File;
use std::io;

use super::WsiError;

pub const TAG_IMAGE_WIDTH: u16 = 256;
pub const TAG_IMAGE_LENGTH: u16 = 257;
pub const TAG_BITS_PER_SAMPLE: u16 = 258;
pub const TAG_COMPRESSION: u16 = 259;
pub const TAG_PHOTOMETRIC: u16 = 262;
pub const TAG_IMAGE_DESCRIPTION: u16 = 270;
pub const TAG_SAMPLES_PER_PIXEL: u16 = 277;
pub const TAG_PLANAR_CONFIGURATION: u16 = 284;
pub const TAG_PREDICTOR: u16 = 317;
pub const TAG_TILE_WIDTH: u16 = 322;
pub const TAG_TILE_LENGTH: u16 = 323;
pub const TAG_TILE_OFFSETS: u16 = 324;
pub const TAG_TILE_BYTE_COUNTS: u16 = 325;

pub const TYPE_BYTE: u16 = 1;
pub const TYPE_ASCII: u16 = 2;
pub const TYPE_SHORT: u16 = 3;
pub const TYPE_LONG: u16 = 4;
pub const TYPE_LONG8: u16 = 16;

const MAX_DIRECTORIES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endianness {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TiffHeader {
    pub endianness: Endianness,
    pub is_bigtiff: bool,
    pub first_directory_offset: u64,
}

/// Random-access byte storage backing a slide.
pub trait ByteSource: Send + Sync {
    fn len(&self) -> u64;

    fn read_exact_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<()>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ByteSource for Vec<u8> {
    fn len(&self) -> u64 {
        self.as_slice().len() as u64
    }

    fn read_exact_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<()> {
        let start = usize::try_from(offset).map_err(|_| io::ErrorKind::UnexpectedEof)?;
        let src = start
            .checked_add(buf.len())
            .and_then(|end| self.get(start..end))
            .ok_or(io::ErrorKind::UnexpectedEof)?;
        buf.copy_from_slice(src);
        Ok(())
    }
}

pub struct FileSource {
    file: File,
    len: u64,
}

impl FileSource {
    pub fn new(file: File) -> io::Result<Self> {
        let len = file.metadata()?.len();
        Ok(Self { file, len })
    }
}

impl ByteSource for FileSource {
    fn len(&self) -> u64 {
        self.len
    }

    #[cfg(unix)]
    fn read_exact_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<()> {
        use std::os::unix::fs::FileExt;
        self.file.read_exact_at(buf, offset)
    }

    #[cfg(windows)]
    fn read_exact_at(&self, mut offset: u64, mut buf: &mut [u8]) -> io::Result<()> {
        use std::os::windows::fs::FileExt;
        while !buf.is_empty() {
            match self.file.seek_read(buf, offset)? {
                0 => return Err(io::ErrorKind::UnexpectedEof.into()),
                n => {
                    buf = &mut buf[n..];
                    offset += n as u64;
                }
            }
        }
        Ok(())
    }
}

/// Reads `len` bytes at `offset`, refusing ranges that leave the source.
pub(crate) fn read_range(src: &dyn ByteSource, offset: u64, len: u64) -> Result<Vec<u8>, WsiError> {
    let end = offset.checked_add(len).ok_or(WsiError::Truncated)?;
    if end > src.len() {
        return Err(WsiError::Truncated);
    }
    let len = usize::try_from(len).map_err(|_| WsiError::Truncated)?;
    let mut buf = vec![0u8; len];
    src.read_exact_at(offset, &mut buf)?;
    Ok(buf)
}

pub fn parse_header(bytes: &[u8]) -> Result<TiffHeader, WsiError> {
    if bytes.len() < 8 {
        return Err(WsiError::Truncated);
    }
    let endianness = match &bytes[0..2] {
        b"II" => Endianness::Little,
        b"MM" => Endianness::Big,
        _ => return Err(WsiError::UnknownMagic),
    };
    let e = endianness;
    match e.u16(&bytes[2..4]) {
        42 => Ok(TiffHeader {
            endianness,
            is_bigtiff: false,
            first_directory_offset: u64::from(e.u32(&bytes[4..8])),
        }),
        43 => {
            if bytes.len() < 16 {
                return Err(WsiError::Truncated);
            }
            let offset_size = e.u16(&bytes[4..6]);
            if offset_size != 8 || e.u16(&bytes[6..8]) != 0 {
                return Err(WsiError::Parse(format!(
                    "BigTIFF offset size {offset_size} is not 8"
                )));
            }
            Ok(TiffHeader {
                endianness,
                is_bigtiff: true,
                first_directory_offset: e.u64(&bytes[8..16]),
            })
        }
        version => Err(WsiError::UnsupportedVersion(version)),
    }
}

impl Endianness {
    pub fn u16(self, b: &[u8]) -> u16 {
        let a = [b[0], b[1]];
        match self {
            Endianness::Little => u16::from_le_bytes(a),
            Endianness::Big => u16::from_be_bytes(a),
        }
    }

    pub fn u32(self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self {
            Endianness::Little => u32::from_le_bytes(a),
            Endianness::Big => u32::from_be_bytes(a),
        }
    }

    pub fn u64(self, b: &[u8]) -> u64 {
        let mut a = [0u8; 8];
        a.copy_from_slice(&b[..8]);
        match self {
            Endianness::Little => u64::from_le_bytes(a),
            Endianness::Big => u64::from_be_bytes(a),
        }
    }

    pub fn put_u16(self, out: &mut Vec<u8>, v: u16) {
        match self {
            Endianness::Little => out.extend_from_slice(&v.to_le_bytes()),
            Endianness::Big => out.extend_from_slice(&v.to_be_bytes()),
        }
    }

    pub fn put_u32(self, out: &mut Vec<u8>, v: u32) {
        match self {
            Endianness::Little => out.extend_from_slice(&v.to_le_bytes()),
            Endianness::Big => out.extend_from_slice(&v.to_be_bytes()),
        }
    }

    pub fn put_u64(self, out: &mut Vec<u8>, v: u64) {
        match self {
            Endianness::Little => out.extend_from_slice(&v.to_le_bytes()),
            Endianness::Big => out.extend_from_slice(&v.to_be_bytes()),
        }
    }
}

fn type_size(field_type: u16) -> Option<u64> {
    match field_type {
        1 | 2 | 6 | 7 => Some(1),
        3 | 8 => Some(2),
        4 | 9 | 11 | 13 => Some(4),
        5 | 10 | 12 | 16 | 17 | 18 => Some(8),
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub tag: u16,
    pub field_type: u16,
    /// Raw value bytes, either copied from the inline slot or read from the value offset.
    pub data: Vec<u8>,
}

/// One image file directory with all value payloads resolved.
#[derive(Debug, Clone)]
pub struct Directory {
    pub offset: u64,
    pub entries: Vec<Entry>,
    endianness: Endianness,
}

impl Directory {
    pub fn entry(&self, tag: u16) -> Option<&Entry> {
        self.entries.iter().find(|e| e.tag == tag)
    }

    /// Unsigned integer values of a BYTE/SHORT/LONG/LONG8 field.
    pub fn uints(&self, tag: u16) -> Result<Option<Vec<u64>>, WsiError> {
        let Some(entry) = self.entry(tag) else {
            return Ok(None);
        };
        let e = self.endianness;
        let values = match entry.field_type {
            TYPE_BYTE => entry.data.iter().map(|&b| u64::from(b)).collect(),
            TYPE_SHORT => entry
                .data
                .chunks_exact(2)
                .map(|c| u64::from(e.u16(c)))
                .collect(),
            TYPE_LONG | 13 => entry
                .data
                .chunks_exact(4)
                .map(|c| u64::from(e.u32(c)))
                .collect(),
            TYPE_LONG8 | 18 => entry.data.chunks_exact(8).map(|c| e.u64(c)).collect(),
            other => {
                return Err(WsiError::Parse(format!(
                    "tag {tag} has non-integer type {other}"
                )))
            }
        };
        Ok(Some(values))
    }

    pub fn uint(&self, tag: u16) -> Result<Option<u64>, WsiError> {
        match self.uints(tag)? {
            None => Ok(None),
            Some(v) => v
                .first()
                .copied()
                .map(Some)
                .ok_or_else(|| WsiError::Parse(format!("tag {tag} has no values"))),
        }
    }

    pub fn ascii(&self, tag: u16) -> Option<String> {
        let entry = self.entry(tag)?;
        if entry.field_type != TYPE_ASCII {
            return None;
        }
        let text = entry.data.split(|&b| b == 0).next().unwrap_or_default();
        Some(String::from_utf8_lossy(text).into_owned())
    }
}

/// Walks the directory chain starting at the header's first offset.
pub fn read_directories(src: &dyn ByteSource, header: &TiffHeader) -> Result<Vec<Directory>, WsiError> {
    let mut dirs = Vec::new();
    let mut seen = HashSet::new();
    let mut offset = header.first_directory_offset;
    while offset != 0 {
        if !seen.insert(offset) {
            return Err(WsiError::Parse(format!("directory loop at offset {offset}")));
        }
        if dirs.len() >= MAX_DIRECTORIES {
            return Err(WsiError::Parse("too many directories".into()));
        }
        let (dir, next) = read_directory(src, header, offset)?;
        dirs.push(dir);
        offset = next;
    }
    Ok(dirs)
}

fn read_directory(
    src: &dyn ByteSource,
    header: &TiffHeader,
    offset: u64,
) -> Result<(Directory, u64), WsiError> {
    let e = header.endianness;
    let (count_size, entry_size, slot_size) = if header.is_bigtiff {
        (8u64, 20u64, 8u64)
    } else {
        (2, 12, 4)
    };
    let count_bytes = read_range(src, offset, count_size)?;
    let count = if header.is_bigtiff {
        e.u64(&count_bytes)
    } else {
        u64::from(e.u16(&count_bytes))
    };
    let table_len = count.checked_mul(entry_size).ok_or(WsiError::Truncated)?;
    let table_start = offset + count_size;
    let table = read_range(src, table_start, table_len)?;
    let next_bytes = read_range(src, table_start + table_len, slot_size)?;
    let next = if header.is_bigtiff {
        e.u64(&next_bytes)
    } else {
        u64::from(e.u32(&next_bytes))
    };

    let mut entries = Vec::with_capacity(table.len() / entry_size as usize);
    for raw in table.chunks_exact(entry_size as usize) {
        let tag = e.u16(&raw[0..2]);
        let field_type = e.u16(&raw[2..4]);
        let (value_count, slot) = if header.is_bigtiff {
            (e.u64(&raw[4..12]), &raw[12..20])
        } else {
            (u64::from(e.u32(&raw[4..8])), &raw[8..12])
        };
        // Unknown types can be skipped; their size is unknowable.
        let Some(size) = type_size(field_type) else {
            continue;
        };
        let byte_len = value_count.checked_mul(size).ok_or(WsiError::Truncated)?;
        let data = if byte_len <= slot_size {
            slot[..byte_len as usize].to_vec()
        } else {
            let value_offset = if header.is_bigtiff {
                e.u64(slot)
            } else {
                u64::from(e.u32(slot))
            };
            read_range(src, value_offset, byte_len)?
        };
        entries.push(Entry {
            tag,
            field_type,
            data,
        });
    }
    Ok((
        Directory {
            offset,
            entries,
            endianness: e,
        },
        next,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classic_little_endian_header() {
        let h = parse_header(&[b'I', b'I', 42, 0, 8, 0, 0, 0]).unwrap();
        assert_eq!(
            h,
            TiffHeader {
                endianness: Endianness::Little,
                is_bigtiff: false,
                first_directory_offset: 8
            }
        );
    }

    #[test]
    fn bigtiff_big_endian_header() {
        let bytes = [b'M', b'M', 0, 43, 0, 8, 0, 0, 0, 0, 0, 0, 0, 0, 0, 16];
        let h = parse_header(&bytes).unwrap();
        assert_eq!(h.endianness, Endianness::Big);
        assert!(h.is_bigtiff);
        assert_eq!(h.first_directory_offset, 16);
    }

    #[test]
    fn header_errors() {
        assert!(matches!(
            parse_header(b"XX*\0\x08\0\0\0"),
            Err(WsiError::UnknownMagic)
        ));
        assert!(matches!(
            parse_header(&[b'I', b'I', 44, 0, 8, 0, 0, 0]),
            Err(WsiError::UnsupportedVersion(44))
        ));
        assert!(matches!(parse_header(b"II*"), Err(WsiError::Truncated)));
        assert!(matches!(
            parse_header(&[b'I', b'I', 43, 0, 8, 0, 0, 0]),
            Err(WsiError::Truncated)
        ));
    }

    #[test]
    fn range_reads_stay_inside_the_source() {
        let src = vec![1u8, 2, 3];
        assert_eq!(read_range(&src, 1, 2).unwrap(), vec![2, 3]);
        assert!(read_range(&src, 2, 2).is_err());
        assert!(read_range(&src, u64::MAX, 2).is_err());
    }
}
