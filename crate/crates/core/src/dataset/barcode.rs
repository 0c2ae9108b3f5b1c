//! TCGA slide barcodes, e.g. `TCGA-C5-A3HD-01A-01-DX1`.
//!
//! Segments: project, tissue source site, participant, sample type + vial,
//! portion (+ optional analyte letter), slide. The slide code prefix gives the
//! preparation: `DX` diagnostic FFPE, `TS`/`BS` frozen top/bottom sections.

use super::DatasetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preparation {
    Ffpe,
    Frozen,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BarcodeFields {
    pub project: String,
    pub tissue_source_site: String,
    pub participant: String,
    pub sample: String,
    pub vial: String,
    pub portion: String,
    pub analyte: String,
    pub slide_code: String,
}

impl BarcodeFields {
    pub fn preparation(&self) -> Preparation {
        let (prefix, number) = self.slide_code.split_at(self.slide_code.len().min(2));
        if number.is_empty() || !number.bytes().all(|b| b.is_ascii_digit()) {
            return Preparation::Unknown;
        }
        match prefix {
            "DX" => Preparation::Ffpe,
            "TS" | "BS" => Preparation::Frozen,
            _ => Preparation::Unknown,
        }
    }

    pub fn is_ffpe(&self) -> bool {
        self.preparation() == Preparation::Ffpe
    }
}

/// Parses a slide barcode. Anything after the first `.` (file UUID suffixes) is
/// ignored.
pub fn parse_tcga_slide_barcode(barcode: &str) -> Result<BarcodeFields, DatasetError> {
    let malformed = || DatasetError::MalformedBarcode(barcode.to_string());
    let stem = barcode.trim().split('.').next().unwrap_or_default();
    let segments: Vec<&str> = stem.split('-').collect();
    if segments.len() != 6 {
        return Err(malformed());
    }
    let slide = segments[5];
    if segments[..5].iter().any(|s| s.is_empty()) || slide.is_empty() {
        return Err(malformed());
    }
    let sample_vial = segments[3];
    if sample_vial.len() < 2 || !sample_vial.as_bytes()[..2].iter().all(u8::is_ascii_digit) {
        return Err(malformed());
    }
    let portion_seg = segments[4];
    let digits = portion_seg.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return Err(malformed());
    }
    Ok(BarcodeFields {
        project: segments[0].to_string(),
        tissue_source_site: segments[1].to_string(),
        participant: segments[2].to_string(),
        sample: sample_vial[..2].to_string(),
        vial: sample_vial[2..].to_string(),
        portion: portion_seg[..digits].to_string(),
        analyte: portion_seg[digits..].to_string(),
        slide_code: slide.to_string(),
    })
}
