//! `slides.tsv`: the labeled slide list a run starts from.
//!
//! Columns are `slide_path`, `class_label` and an optional `magnification`
//! override. Relative paths resolve against the list's directory.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use super::{ClassLabel, DatasetError};

pub const SLIDE_LIST_HEADER: &str = "slide_path\tclass_label\tmagnification";

#[derive(Debug, Clone, PartialEq)]
pub struct SlideEntry {
    pub path: PathBuf,
    pub class_label: ClassLabel,
    pub magnification: Option<f64>,
}

pub fn read_slide_list<R: BufRead>(input: R, base_dir: &Path) -> Result<Vec<SlideEntry>, DatasetError> {
    let mut entries = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("slide_path")) {
            continue;
        }
        let bad = |what: &str| DatasetError::Manifest(format!("slide list line {}: {what}", i + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&cols.len()) || cols[0].is_empty() {
            return Err(bad("expected slide_path, class_label and optional magnification"));
        }
        let magnification = match cols.get(2).map(|s| s.trim()) {
            None | Some("") => None,
            Some(s) => Some(
                s.parse::<f64>()
                    .ok()
                    .filter(|m| *m > 0.0 && m.is_finite())
                    .ok_or_else(|| bad("magnification must be a positive number"))?,
            ),
        };
        let path = Path::new(cols[0]);
        entries.push(SlideEntry {
            path: if path.is_absolute() { path.to_path_buf() } else { base_dir.join(path) },
            class_label: cols[1].parse()?,
            magnification,
        });
    }
    Ok(entries)
}

pub fn load_slide_list(path: &Path) -> Result<Vec<SlideEntry>, DatasetError> {
    let file = std::fs::File::open(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    read_slide_list(std::io::BufReader::new(file), base)
}

/// Writes entries with paths relative to `base_dir` where possible.
pub fn write_slide_list<W: Write>(mut out: W, entries: &[SlideEntry], base_dir: &Path) -> Result<(), DatasetError> {
    writeln!(out, "{SLIDE_LIST_HEADER}")?;
    for e in entries {
        let path = e.path.strip_prefix(base_dir).unwrap_or(&e.path);
        let mag = e.magnification.map(|m| m.to_string()).unwrap_or_default();
        writeln!(out, "{}\t{}\t{}", path.display(), e.class_label, mag)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_relative_paths() {
        let base = Path::new("/data/slides");
        let entries = vec![
            SlideEntry { path: base.join("a.tif"), class_label: ClassLabel::Scc, magnification: None },
            SlideEntry { path: "/elsewhere/b.ppm".into(), class_label: ClassLabel::Ac, magnification: Some(20.0) },
        ];
        let mut buf = Vec::new();
        write_slide_list(&mut buf, &entries, base).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\na.tif\tSCC\t\n"));
        assert_eq!(read_slide_list(buf.as_slice(), base).unwrap(), entries);
    }

    #[test]
    fn rejects_bad_lines() {
        let base = Path::new(".");
        assert!(read_slide_list("a.tif\tXX\n".as_bytes(), base).is_err());
        assert!(read_slide_list("a.tif\tSCC\t-3\n".as_bytes(), base).is_err());
        assert!(read_slide_list("a.tif\n".as_bytes(), base).is_err());
        assert_eq!(read_slide_list("# note\n\na.tif\tac\n".as_bytes(), base).unwrap().len(), 1);
    }
}
