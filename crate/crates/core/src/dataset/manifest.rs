//! `manifest.tsv`: one tab-separated line per tile under a fixed header.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use super::DatasetError;

pub const MANIFEST_HEADER: [&str; 10] = [
    "slide_id",
    "tile_path",
    "class_label",
    "origin_x",
    "origin_y",
    "tile_size_px",
    "magnification",
    "tissue_fraction",
    "split",
    "rejected_reason",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Scc,
    Ac,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 2] = [ClassLabel::Scc, ClassLabel::Ac];

    /// Binary target; SCC is the positive class.
    pub fn is_positive(self) -> bool {
        self == ClassLabel::Scc
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassLabel::Scc => "SCC",
            ClassLabel::Ac => "AC",
        })
    }
}

impl FromStr for ClassLabel {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SCC" => Ok(ClassLabel::Scc),
            "AC" => Ok(ClassLabel::Ac),
            _ => Err(DatasetError::Manifest(format!("unknown class label {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        })
    }
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            _ => Err(DatasetError::Manifest(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileRecord {
    pub slide_id: String,
    pub tile_path: String,
    pub class_label: ClassLabel,
    pub origin_x: usize,
    pub origin_y: usize,
    pub tile_size_px: usize,
    pub magnification: f64,
    pub tissue_fraction: f64,
    pub split: Split,
    /// Set by the tissue filter, or by hand to exclude a tile.
    pub rejected_reason: Option<String>,
}

impl TileRecord {
    pub fn is_rejected(&self) -> bool {
        self.rejected_reason.is_some()
    }

    fn to_line(&self) -> Result<String, DatasetError> {
        let fields = [
            self.slide_id.clone(),
            self.tile_path.clone(),
            self.class_label.to_string(),
            self.origin_x.to_string(),
            self.origin_y.to_string(),
            self.tile_size_px.to_string(),
            self.magnification.to_string(),
            self.tissue_fraction.to_string(),
            self.split.to_string(),
            self.rejected_reason.clone().unwrap_or_default(),
        ];
        if let Some(bad) = fields.iter().find(|f| f.contains(['\t', '\n', '\r'])) {
            return Err(DatasetError::Manifest(format!("field {bad:?} contains a tab or newline")));
        }
        Ok(fields.join("\t"))
    }

    fn from_line(line: &str, line_no: usize) -> Result<Self, DatasetError> {
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| DatasetError::Manifest(format!("line {line_no}: {what}"));
        if cols.len() != MANIFEST_HEADER.len() {
            return Err(bad(&format!("expected {} columns, found {}", MANIFEST_HEADER.len(), cols.len())));
        }
        let num = |i: usize| cols[i].parse::<usize>().map_err(|_| bad(MANIFEST_HEADER[i]));
        let real = |i: usize| cols[i].parse::<f64>().map_err(|_| bad(MANIFEST_HEADER[i]));
        let tissue_fraction = real(7)?;
        if !(0.0..=1.0).contains(&tissue_fraction) {
            return Err(bad("tissue_fraction outside [0, 1]"));
        }
        Ok(TileRecord {
            slide_id: cols[0].to_string(),
            tile_path: cols[1].to_string(),
            class_label: cols[2].parse()?,
            origin_x: num(3)?,
            origin_y: num(4)?,
            tile_size_px: num(5)?,
            magnification: real(6)?,
            tissue_fraction,
            split: cols[8].parse()?,
            rejected_reason: (!cols[9].is_empty()).then(|| cols[9].to_string()),
        })
    }
}

pub fn write_manifest<W: Write>(mut out: W, records: &[TileRecord]) -> Result<(), DatasetError> {
    writeln!(out, "{}", MANIFEST_HEADER.join("\t"))?;
    for r in records {
        writeln!(out, "{}", r.to_line()?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest<R: BufRead>(input: R) -> Result<Vec<TileRecord>, DatasetError> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| DatasetError::Manifest("empty manifest".into()))?;
    if header.trim_end_matches('\r') != MANIFEST_HEADER.join("\t") {
        return Err(DatasetError::Manifest("unexpected header".into()));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        records.push(TileRecord::from_line(line, i + 2)?);
    }
    Ok(records)
}

pub fn save_manifest(path: &Path, records: &[TileRecord]) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path)?;
    write_manifest(std::io::BufWriter::new(file), records)
}

pub fn load_manifest(path: &Path) -> Result<Vec<TileRecord>, DatasetError> {
    let file = std::fs::File::open(path)?;
    read_manifest(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(i: usize) -> TileRecord {
        TileRecord {
            slide_id: format!("slide{i}"),
            tile_path: format!("tiles/slide{i}__x{i}_y0.ppm"),
            class_label: if i % 2 == 0 { ClassLabel::Scc } else { ClassLabel::Ac },
            origin_x: i,
            origin_y: 0,
            tile_size_px: 1024,
            magnification: 20.0,
            tissue_fraction: 0.1 * i as f64,
            split: Split::Unassigned,
            rejected_reason: (i == 1).then(|| "low_tissue".to_string()),
        }
    }

    #[test]
    fn round_trip() {
        let records: Vec<_> = (0..4).map(record).collect();
        let mut buf = Vec::new();
        write_manifest(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("slide_id\ttile_path\tclass_label\t"));
        assert_eq!(read_manifest(buf.as_slice()).unwrap(), records);
    }

    #[test]
    fn rejects_bad_rows() {
        let header = MANIFEST_HEADER.join("\t");
        let bad = format!("{header}\nslide\tp\tXYZ\t0\t0\t1\t20\t0.5\ttrain\t\n");
        assert!(read_manifest(bad.as_bytes()).is_err());
        let bad = format!("{header}\nslide\tp\tSCC\t0\t0\t1\t20\t1.5\ttrain\t\n");
        assert!(read_manifest(bad.as_bytes()).is_err());
        assert!(read_manifest("nope\n".as_bytes()).is_err());
        let mut r = record(0);
        r.slide_id = "a\tb".into();
        assert!(write_manifest(Vec::new(), &[r]).is_err());
    }
}
