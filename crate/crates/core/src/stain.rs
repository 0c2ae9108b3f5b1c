//! H&E stain normalization in optical-density space (Macenko plane fitting).
//!
//! Beer–Lambert makes stain mixing linear in optical density, so every tissue
//! pixel's OD vector is a nonnegative combination of two stain directions. The
//! estimator finds the plane of the OD cloud, takes the extreme angular
//! percentiles inside it as the stain directions, and records robust maximum
//! concentrations. Normalization re-expresses each pixel's concentrations in a
//! reference profile.

use std::fmt::Write as _;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const DEFAULT_BETA: f64 = 0.15;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const CONCENTRATION_PERCENTILE: f64 = 99.0;
/// Minimum angular spread between the two extreme stain directions.
pub const MIN_ANGLE_SPREAD: f64 = 1e-3;
/// Minimum ratio of the second to the first principal variance; below it the OD
/// cloud is a single line and the second stain is unidentifiable.
pub const MIN_PLANE_RATIO: f64 = 1e-3;
pub const MIN_RETAINED_PIXELS: usize = 2;
pub const MAX_SAMPLE_PIXELS: usize = 100_000;

const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum StainError {
    #[error("only {0} pixels above the optical-density cutoff")]
    InsufficientTissue(usize),
    #[error("stain directions are degenerate: {0}")]
    DegenerateStains(String),
    #[error("invalid stain profile: {0}")]
    InvalidProfile(String),
    #[error("malformed profile text: {0}")]
    Format(String),
}

/// Optical density `-log10(max(v, 1) / 255)`.
pub fn rgb_to_od(v: u8) -> f64 {
    -(f64::from(v.max(1)) / 255.0).log10()
}

/// Inverse of [`rgb_to_od`]: `round(255 · 10^-od)` clamped to `[0, 255]`.
pub fn od_to_rgb(od: f64) -> u8 {
    let v = 255.0 * 10f64.powf(-od);
    if v.is_nan() {
        return 0;
    }
    v.round().clamp(0.0, 255.0) as u8
}

fn od_table() -> [f64; 256] {
    let mut t = [0.0; 256];
    for (v, od) in t.iter_mut().enumerate() {
        *od = rgb_to_od(v as u8);
    }
    t
}

/// Two stain directions and their robust maximum concentrations.
#[derive(Debug, Clone, PartialEq)]
pub struct StainProfile {
    /// `stain_matrix[channel][stain]`, hematoxylin in column 0, eosin in column 1.
    pub stain_matrix: [[f64; 2]; 3],
    pub max_concentrations: [f64; 2],
}

impl StainProfile {
    /// Builds a profile from raw stain directions, normalizing each to unit length.
    pub fn from_columns(
        hematoxylin: [f64; 3],
        eosin: [f64; 3],
        max_concentrations: [f64; 2],
    ) -> Result<Self, StainError> {
        let h = unit(hematoxylin)?;
        let e = unit(eosin)?;
        let mut stain_matrix = [[0.0; 2]; 3];
        for c in 0..3 {
            stain_matrix[c] = [h[c], e[c]];
        }
        let profile = Self {
            stain_matrix,
            max_concentrations,
        };
        profile.validate()?;
        Ok(profile)
    }

    /// Widely used H&E reference. The published hematoxylin direction is not
    /// exactly unit length and is normalized here.
    pub fn reference() -> Self {
        Self::from_columns(
            [0.5626, 0.7201, 0.4772],
            [0.2159, 0.8012, 0.5581],
            [1.9705, 1.0308],
        )
        .expect("reference profile is valid")
    }

    pub fn column(&self, stain: usize) -> [f64; 3] {
        [
            self.stain_matrix[0][stain],
            self.stain_matrix[1][stain],
            self.stain_matrix[2][stain],
        ]
    }

    pub fn validate(&self) -> Result<(), StainError> {
        for s in 0..2 {
            let col = self.column(s);
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(StainError::InvalidProfile(format!("column {s} has norm {norm}")));
            }
            if col.iter().any(|&v| !(v >= 0.0)) {
                return Err(StainError::InvalidProfile(format!("column {s} has a negative entry")));
            }
            let m = self.max_concentrations[s];
            if !(m > 0.0 && m.is_finite()) {
                return Err(StainError::InvalidProfile(format!("max concentration {m}")));
            }
        }
        self.pseudo_inverse().map(|_| ())
    }

    /// `(SᵀS)⁻¹Sᵀ`, the least-squares map from OD to concentrations.
    fn pseudo_inverse(&self) -> Result<[[f64; 3]; 2], StainError> {
        let (h, e) = (self.column(0), self.column(1));
        let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let (a, b, d) = (dot(h, h), dot(h, e), dot(e, e));
        let det = a * d - b * b;
        if det.abs() < 1e-12 {
            return Err(StainError::DegenerateStains("stain columns are parallel".into()));
        }
        let mut out = [[0.0; 3]; 2];
        for c in 0..3 {
            out[0][c] = (d * h[c] - b * e[c]) / det;
            out[1][c] = (-b * h[c] + a * e[c]) / det;
        }
        Ok(out)
    }

    /// Least-squares stain concentrations of one OD vector.
    pub fn concentrations(&self, od: [f64; 3]) -> [f64; 2] {
        let p = self.pseudo_inverse().expect("validated profile");
        [
            p[0][0] * od[0] + p[0][1] * od[1] + p[0][2] * od[2],
            p[1][0] * od[0] + p[1][1] * od[1] + p[1][2] * od[2],
        ]
    }

    /// Six matrix entries row-major, then the two concentrations, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in &self.stain_matrix {
            for v in row {
                writeln!(s, "{v}").unwrap();
            }
        }
        for v in &self.max_concentrations {
            writeln!(s, "{v}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, StainError> {
        let values = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| l.parse::<f64>().map_err(|e| StainError::Format(format!("{l:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != 8 {
            return Err(StainError::Format(format!("expected 8 values, found {}", values.len())));
        }
        let profile = Self {
            stain_matrix: [
                [values[0], values[1]],
                [values[2], values[3]],
                [values[4], values[5]],
            ],
            max_concentrations: [values[6], values[7]],
        };
        profile.validate()?;
        Ok(profile)
    }
}

fn unit(v: [f64; 3]) -> Result<[f64; 3], StainError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(StainError::InvalidProfile("zero stain vector".into()));
    }
    Ok(v.map(|x| x / norm))
}

/// Percentile with linear interpolation between order statistics. `sorted` must be
/// ascending and non-empty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Orients an estimated direction into the positive orthant and renormalizes.
fn positive_unit(v: Vector3<f64>) -> Result<[f64; 3], StainError> {
    let v = if v.sum() < 0.0 { -v } else { v };
    unit([v[0].max(0.0), v[1].max(0.0), v[2].max(0.0)])
        .map_err(|_| StainError::DegenerateStains("stain direction left the positive orthant".into()))
}

/// Estimates a stain profile from RGB pixels.
///
/// Pixels with any channel OD at or below `beta` are treated as transparent and
/// ignored. The stain directions are read at the `alpha` and `100 - alpha`
/// angular percentiles within the principal plane; hematoxylin is the direction
/// with the larger red-channel OD.
pub fn estimate_stain_matrix(pixels: &[u8], beta: f64, alpha: f64) -> Result<StainProfile, StainError> {
    let table = od_table();
    let retained: Vec<Vector3<f64>> = pixels
        .chunks_exact(3)
        .map(|p| Vector3::new(table[p[0] as usize], table[p[1] as usize], table[p[2] as usize]))
        .filter(|od| od.iter().all(|&v| v > beta))
        .collect();
    if retained.len() < MIN_RETAINED_PIXELS {
        return Err(StainError::InsufficientTissue(retained.len()));
    }

    let n = retained.len() as f64;
    let mean = retained.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for od in &retained {
        let d = od - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l1 > 0.0) || l2 < MIN_PLANE_RATIO * l1 {
        return Err(StainError::DegenerateStains(format!(
            "optical densities lie on a line (principal variances {l1:.3e}, {l2:.3e})"
        )));
    }
    let mut e1: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    let e2: Vector3<f64> = eig.eigenvectors.column(order[1]).into_owned();
    if e1.dot(&mean) < 0.0 {
        e1 = -e1;
    }

    let mut angles: Vec<f64> = retained.iter().map(|od| od.dot(&e2).atan2(od.dot(&e1))).collect();
    angles.sort_by(f64::total_cmp);
    let min_phi = percentile(&angles, alpha);
    let max_phi = percentile(&angles, 100.0 - alpha);
    if (max_phi - min_phi).abs() < MIN_ANGLE_SPREAD {
        return Err(StainError::DegenerateStains(format!(
            "angular spread {:.2e} rad",
            (max_phi - min_phi).abs()
        )));
    }
    let a = positive_unit(e1 * min_phi.cos() + e2 * min_phi.sin())?;
    let b = positive_unit(e1 * max_phi.cos() + e2 * max_phi.sin())?;
    let (h, e) = if a[0] >= b[0] { (a, b) } else { (b, a) };

    let mut profile = StainProfile::from_columns(h, e, [1.0, 1.0])?;
    let mut conc = [Vec::with_capacity(retained.len()), Vec::with_capacity(retained.len())];
    for od in &retained {
        let c = profile.concentrations([od[0], od[1], od[2]]);
        conc[0].push(c[0]);
        conc[1].push(c[1]);
    }
    for (s, values) in conc.iter_mut().enumerate() {
        values.sort_by(f64::total_cmp);
        profile.max_concentrations[s] = percentile(values, CONCENTRATION_PERCENTILE);
    }
    profile.validate().map_err(|e| match e {
        StainError::InvalidProfile(msg) => StainError::DegenerateStains(msg),
        other => other,
    })?;
    Ok(profile)
}

/// Maps OD vectors from a source profile onto a reference profile.
#[derive(Debug, Clone)]
pub struct Normalizer {
    source: StainProfile,
    reference: StainProfile,
    scale: [f64; 2],
}

impl Normalizer {
    pub fn new(source: &StainProfile, reference: &StainProfile) -> Result<Self, StainError> {
        source.validate()?;
        reference.validate()?;
        Ok(Self {
            source: source.clone(),
            reference: reference.clone(),
            scale: [
                reference.max_concentrations[0] / source.max_concentrations[0],
                reference.max_concentrations[1] / source.max_concentrations[1],
            ],
        })
    }

    /// Rescaled concentrations of `od` under the source profile.
    pub fn concentrations(&self, od: [f64; 3]) -> [f64; 2] {
        let c = self.source.concentrations(od);
        [c[0] * self.scale[0], c[1] * self.scale[1]]
    }

    pub fn map_od(&self, od: [f64; 3]) -> [f64; 3] {
        let c = self.concentrations(od);
        let m = &self.reference.stain_matrix;
        [
            m[0][0] * c[0] + m[0][1] * c[1],
            m[1][0] * c[0] + m[1][1] * c[1],
            m[2][0] * c[0] + m[2][1] * c[1],
        ]
    }

    pub fn apply(&self, pixels: &[u8]) -> Vec<u8> {
        let table = od_table();
        let mut out = Vec::with_capacity(pixels.len());
        for p in pixels.chunks_exact(3) {
            let od = self.map_od([table[p[0] as usize], table[p[1] as usize], table[p[2] as usize]]);
            out.extend(od.iter().map(|&v| od_to_rgb(v)));
        }
        out
    }
}

pub fn normalize_tile(pixels: &[u8], source: &StainProfile, reference: &StainProfile) -> Result<Vec<u8>, StainError> {
    Ok(Normalizer::new(source, reference)?.apply(pixels))
}

/// Uniform sample of at most `capacity` pixels from a stream (reservoir sampling).
pub struct PixelReservoir {
    capacity: usize,
    seen: u64,
    pixels: Vec<u8>,
    rng: ChaCha8Rng,
}

impl PixelReservoir {
    pub fn new(capacity: usize, rng: ChaCha8Rng) -> Self {
        Self {
            capacity,
            seen: 0,
            pixels: Vec::new(),
            rng,
        }
    }

    pub fn offer(&mut self, rgb: [u8; 3]) {
        self.seen += 1;
        if self.pixels.len() < self.capacity * 3 {
            self.pixels.extend_from_slice(&rgb);
        } else {
            let j = self.rng.gen_range(0..self.seen);
            if (j as usize) < self.capacity {
                let i = j as usize * 3;
                self.pixels[i..i + 3].copy_from_slice(&rgb);
            }
        }
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn od_conversions() {
        assert_eq!(rgb_to_od(255), 0.0);
        // log10(255 / 26) = 0.991567
        assert!((rgb_to_od(26) - 0.991567).abs() < 1e-6);
        assert!((rgb_to_od(0) - 2.4065).abs() < 5e-5);
        assert_eq!(rgb_to_od(0), rgb_to_od(1));
        assert_eq!(od_to_rgb(0.0), 255);
        assert_eq!(od_to_rgb(1.0), 26);
        assert_eq!(od_to_rgb(10.0), 0);
        assert_eq!(od_to_rgb(-1.0), 255);
    }

    #[test]
    fn od_round_trip_within_one_level() {
        for v in 1..=255u8 {
            assert!(od_to_rgb(rgb_to_od(v)).abs_diff(v) <= 1, "v={v}");
        }
        for v in 0..254u8 {
            assert!(rgb_to_od(v) >= rgb_to_od(v + 1));
        }
    }

    #[test]
    fn reference_profile_is_unit_norm() {
        let r = StainProfile::reference();
        r.validate().unwrap();
        let h = r.column(0);
        assert!(h[0] > r.column(1)[0]);
        let parsed = StainProfile::from_text(&r.to_text()).unwrap();
        assert_eq!(parsed, r);
    }

    #[test]
    fn profile_text_errors() {
        assert!(StainProfile::from_text("1\n2\n").is_err());
        assert!(StainProfile::from_text("a\nb\nc\nd\ne\nf\ng\nh\n").is_err());
        // non-unit column
        assert!(StainProfile::from_text("1\n0\n1\n1\n0\n0\n1\n1\n").is_err());
    }

    #[test]
    fn white_pixels_stay_white() {
        let r = StainProfile::reference();
        let out = normalize_tile(&[255, 255, 255], &r, &r).unwrap();
        assert_eq!(out, vec![255, 255, 255]);
    }

    #[test]
    fn white_image_has_insufficient_tissue() {
        let white = vec![255u8; 300];
        assert!(matches!(
            estimate_stain_matrix(&white, DEFAULT_BETA, DEFAULT_ALPHA),
            Err(StainError::InsufficientTissue(0))
        ));
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 0.0);
        assert_eq!(percentile(&v, 50.0), 2.0);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert!((percentile(&v, 12.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reservoir_caps_size_and_is_deterministic() {
        let run = || {
            let mut r = PixelReservoir::new(10, ChaCha8Rng::seed_from_u64(3));
            for i in 0..1000u32 {
                r.offer([(i % 256) as u8, (i / 256) as u8, 0]);
            }
            assert_eq!(r.seen(), 1000);
            r.into_pixels()
        };
        let a = run();
        assert_eq!(a.len(), 30);
        assert_eq!(a, run());
    }
}
