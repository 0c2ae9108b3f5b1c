//! Synthetic H&E-like slides for tests and demos.
//!
//! Pixels follow a two-stain Beer-Lambert model: per-pixel hematoxylin and
//! eosin concentrations are painted from simple tissue geometry, then mixed
//! through a slide-specific perturbation of the reference stain vectors.
//!
//! - SCC: sheets of large, densely packed nuclei with occasional keratin pearls.
//! - AC: glands with pale lumens ringed by small nuclei, set in loose stroma.
//!
//! Every slide has a white margin (wider on the top and left) so tiling yields
//! some full-white and some partially covered tiles.

use std::f32::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{write_slide_list, ClassLabel, DatasetError, SlideEntry};
use crate::raster::RgbImage;
use crate::stain::StainProfile;
use crate::wsi::writer::{pyramid_levels, write_pyramid, TiffWriteOptions};
use crate::wsi::WsiError;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("slide must be at least 64x64, got {0}x{1}")]
    TooSmall(usize, usize),
    #[error(transparent)]
    Wsi(#[from] WsiError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic value in `[0, 1)` for a pixel.
fn hash01(x: usize, y: usize, salt: u64) -> f32 {
    let h = splitmix(salt ^ ((x as u64) << 32) ^ y as u64);
    (h >> 40) as f32 / (1u64 << 24) as f32
}

struct Canvas {
    width: usize,
    height: usize,
    h: Vec<f32>,
    e: Vec<f32>,
    tissue: Vec<bool>,
}

impl Canvas {
    /// Calls `f(x, y, u, v)` for pixels inside the ellipse with semi-axes `a`, `b`
    /// rotated by `angle`; `u`, `v` are normalized ellipse coordinates.
    fn ellipse(&mut self, cx: f32, cy: f32, a: f32, b: f32, angle: f32, mut f: impl FnMut(&mut Canvas, usize, usize, f32, f32)) {
        let r = a.max(b).ceil() as isize + 1;
        let (sin, cos) = angle.sin_cos();
        let (x0, y0) = (cx as isize - r, cy as isize - r);
        for y in y0.max(0)..(y0 + 2 * r + 1).min(self.height as isize) {
            for x in x0.max(0)..(x0 + 2 * r + 1).min(self.width as isize) {
                let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                let u = (dx * cos + dy * sin) / a;
                let v = (-dx * sin + dy * cos) / b;
                if u * u + v * v <= 1.0 {
                    f(self, x as usize, y as usize, u, v);
                }
            }
        }
    }

    fn nucleus(&mut self, cx: f32, cy: f32, a: f32, b: f32, angle: f32, density: f32, salt: u64) {
        self.ellipse(cx, cy, a, b, angle, |c, x, y, u, v| {
            let i = y * c.width + x;
            if !c.tissue[i] {
                return;
            }
            let rim = 1.0 + 0.25 * (u * u + v * v);
            let grain = 0.8 + 0.4 * hash01(x, y, salt);
            c.h[i] = density * rim * grain;
            c.e[i] = 0.12;
        });
    }
}

/// Smooth variation in `[-1, 1]` from a few random plane waves.
struct LowFrequency {
    waves: Vec<(f32, f32, f32)>,
}

impl LowFrequency {
    fn new(rng: &mut ChaCha8Rng, scale: f32) -> Self {
        let waves = (0..4)
            .map(|_| {
                let angle = rng.gen_range(0.0..TAU);
                let k = TAU / (scale * rng.gen_range(0.6..1.6));
                (k * angle.cos(), k * angle.sin(), rng.gen_range(0.0..TAU))
            })
            .collect();
        LowFrequency { waves }
    }

    fn at(&self, x: usize, y: usize) -> f32 {
        let s: f32 = self
            .waves
            .iter()
            .map(|(kx, ky, p)| (kx * x as f32 + ky * y as f32 + p).sin())
            .sum();
        s / self.waves.len() as f32
    }
}

/// Tissue covers the slide minus a margin; corners are rounded and the edge
/// wobbles slightly.
fn tissue_mask(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let m = width.min(height) as f32;
    let (left, top) = (0.085 * m, 0.085 * m);
    let (right, bottom) = (width as f32 - 0.022 * m, height as f32 - 0.022 * m);
    let radius = 0.05 * m;
    let wobble = 0.003 * m;
    let phase: f32 = rng.gen_range(0.0..TAU);
    let period = 0.07 * m;
    let mut mask = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let shift = wobble * ((fx + fy) / period + phase).sin();
            let (l, t, r, b) = (left + shift, top + shift, right - shift, bottom - shift);
            if fx < l || fx > r || fy < t || fy > b {
                continue;
            }
            let cx = fx.clamp(l + radius, r - radius);
            let cy = fy.clamp(t + radius, b - radius);
            mask[y * width + x] = (fx - cx).powi(2) + (fy - cy).powi(2) <= radius * radius;
        }
    }
    mask
}

fn paint_scc(c: &mut Canvas, rng: &mut ChaCha8Rng, salt: u64) {
    let lf = LowFrequency::new(rng, 600.0);
    for y in 0..c.height {
        for x in 0..c.width {
            let i = y * c.width + x;
            if c.tissue[i] {
                c.e[i] = 0.62 + 0.12 * lf.at(x, y) + 0.05 * hash01(x, y, salt ^ 1);
                c.h[i] = 0.06;
            }
        }
    }
    let pearl_spacing = 420.0;
    let mut pearls = Vec::new();
    let mut py = pearl_spacing / 2.0;
    while py < c.height as f32 {
        let mut px = pearl_spacing / 2.0;
        while px < c.width as f32 {
            if rng.gen_bool(0.35) {
                let r = rng.gen_range(55.0..95.0);
                let (x, y) = (px + rng.gen_range(-90.0..90.0), py + rng.gen_range(-90.0..90.0));
                pearls.push((x, y, r));
                c.ellipse(x, y, r, r * rng.gen_range(0.75..1.0), rng.gen_range(0.0..TAU), |c, xx, yy, u, v| {
                    let i = yy * c.width + xx;
                    if c.tissue[i] {
                        let rr = (u * u + v * v).sqrt();
                        c.e[i] = 0.95 + 0.2 * (rr * 18.0).sin();
                        c.h[i] = 0.03;
                    }
                });
            }
            px += pearl_spacing;
        }
        py += pearl_spacing;
    }
    let spacing = 26.0;
    let mut y = spacing / 2.0;
    while y < c.height as f32 {
        let mut x = spacing / 2.0;
        while x < c.width as f32 {
            let (nx, ny) = (x + rng.gen_range(-6.0..6.0), y + rng.gen_range(-6.0..6.0));
            let in_pearl = pearls.iter().any(|&(px, py, r)| (nx - px).powi(2) + (ny - py).powi(2) < (r + 6.0) * (r + 6.0));
            let a = rng.gen_range(8.0..12.0);
            let b = a * rng.gen_range(0.65..0.95);
            let angle = rng.gen_range(0.0..TAU);
            let density = rng.gen_range(0.95..1.35);
            if !in_pearl {
                c.nucleus(nx, ny, a, b, angle, density, salt ^ 2);
            }
            x += spacing;
        }
        y += spacing;
    }
}

fn paint_ac(c: &mut Canvas, rng: &mut ChaCha8Rng, salt: u64) {
    let lf = LowFrequency::new(rng, 500.0);
    for y in 0..c.height {
        for x in 0..c.width {
            let i = y * c.width + x;
            if c.tissue[i] {
                c.e[i] = 0.36 + 0.1 * lf.at(x, y) + 0.06 * hash01(x, y, salt ^ 3);
                c.h[i] = 0.04;
            }
        }
    }
    let spacing = 45.0;
    let mut y = spacing / 2.0;
    while y < c.height as f32 {
        let mut x = spacing / 2.0;
        while x < c.width as f32 {
            let (nx, ny) = (x + rng.gen_range(-15.0..15.0), y + rng.gen_range(-15.0..15.0));
            let angle = rng.gen_range(0.0..TAU);
            if rng.gen_bool(0.5) {
                c.nucleus(nx, ny, rng.gen_range(7.0..10.0), rng.gen_range(2.5..3.5), angle, 0.7, salt ^ 4);
            }
            x += spacing;
        }
        y += spacing;
    }
    let gland_spacing = 200.0;
    let mut gy = gland_spacing / 2.0;
    while gy < c.height as f32 {
        let mut gx = gland_spacing / 2.0;
        while gx < c.width as f32 {
            let (cx, cy) = (gx + rng.gen_range(-30.0..30.0), gy + rng.gen_range(-30.0..30.0));
            let lumen = rng.gen_range(40.0..60.0);
            let aspect = rng.gen_range(0.8..1.2);
            let tilt = rng.gen_range(0.0..TAU);
            let band = 22.0;
            c.ellipse(cx, cy, lumen + band, (lumen + band) * aspect, tilt, |c, x, y, u, v| {
                let i = y * c.width + x;
                if !c.tissue[i] {
                    return;
                }
                let rr = (u * u + v * v).sqrt() * (lumen + band);
                if rr < lumen {
                    c.e[i] = 0.18 + 0.04 * hash01(x, y, salt ^ 5);
                    c.h[i] = 0.02;
                } else {
                    c.e[i] = 0.68 + 0.06 * hash01(x, y, salt ^ 6);
                    c.h[i] = 0.05;
                }
            });
            let ring = lumen + band * 0.55;
            let count = ((TAU * ring) / 14.0) as usize;
            let (sin_t, cos_t) = tilt.sin_cos();
            for k in 0..count {
                let theta = TAU * k as f32 / count as f32 + rng.gen_range(-0.05..0.05);
                let (lx, ly) = (ring * theta.cos(), ring * aspect * theta.sin());
                let (nx, ny) = (cx + lx * cos_t - ly * sin_t, cy + lx * sin_t + ly * cos_t);
                let radial = ly.atan2(lx) + tilt;
                c.nucleus(nx, ny, rng.gen_range(6.0..8.0), rng.gen_range(3.8..5.0), radial, 0.85, salt ^ 7);
            }
            gx += gland_spacing;
        }
        gy += gland_spacing;
    }
}

/// Stain vectors for one slide: the reference directions jittered per channel
/// and renormalized, plus per-stain intensity factors.
fn slide_stains(rng: &mut ChaCha8Rng) -> ([f32; 3], [f32; 3]) {
    let reference = StainProfile::reference();
    let mut out = [[0f32; 3]; 2];
    for (s, col) in out.iter_mut().enumerate() {
        let base = reference.column(s);
        let mut v = [0f32; 3];
        for c in 0..3 {
            v[c] = (base[c] as f32 + rng.gen_range(-0.07..0.07)).max(0.05);
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        let intensity = rng.gen_range(0.8..1.2);
        for c in 0..3 {
            col[c] = v[c] / norm * intensity;
        }
    }
    (out[0], out[1])
}

/// Renders one synthetic slide at its native resolution.
pub fn render_slide(class: ClassLabel, width: usize, height: usize, seed: u64) -> Result<RgbImage, SynthError> {
    if width < 64 || height < 64 {
        return Err(SynthError::TooSmall(width, height));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hv, ev) = slide_stains(&mut rng);
    let tissue = tissue_mask(width, height, &mut rng);
    let mut canvas = Canvas {
        width,
        height,
        h: vec![0.0; width * height],
        e: vec![0.0; width * height],
        tissue,
    };
    let salt = splitmix(seed);
    match class {
        ClassLabel::Scc => paint_scc(&mut canvas, &mut rng, salt),
        ClassLabel::Ac => paint_ac(&mut canvas, &mut rng, salt),
    }
    let mut pixels = vec![0u8; width * height * 3];
    pixels.par_chunks_mut(width * 3).enumerate().for_each(|(y, row)| {
        for x in 0..width {
            let i = y * width + x;
            for c in 0..3 {
                let od = canvas.h[i] * hv[c] + canvas.e[i] * ev[c];
                let noise = 6.0 * hash01(x, y, salt ^ (c as u64 + 11)) - 3.0;
                row[x * 3 + c] = (255.0 * 10f32.powf(-od) + noise).round().clamp(0.0, 255.0) as u8;
            }
        }
    });
    Ok(RgbImage {
        width,
        height,
        pixels,
    })
}

/// TCGA-style diagnostic-slide barcode for the `index`-th synthetic slide.
pub fn synthetic_slide_id(class: ClassLabel, index: usize) -> String {
    let site = match class {
        ClassLabel::Scc => "SQ",
        ClassLabel::Ac => "AD",
    };
    format!("TCGA-{site}-{:04}-01Z-00-DX1", index + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortOptions {
    pub slides_per_class: usize,
    /// Native (40x) size of each slide.
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for CohortOptions {
    fn default() -> Self {
        CohortOptions {
            slides_per_class: 2,
            width: 5120,
            height: 3584,
            seed: 0,
        }
    }
}

/// Native magnification written into every synthetic slide.
pub const SYNTH_MAGNIFICATION: f64 = 40.0;

/// Writes `slides_per_class` slides per class as two-level (40x, 10x) tiled
/// TIFFs plus `slides.tsv` into `dir`.
pub fn write_cohort(dir: &Path, opts: &CohortOptions) -> Result<Vec<SlideEntry>, SynthError> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for class in ClassLabel::ALL {
        for i in 0..opts.slides_per_class {
            let id = synthetic_slide_id(class, i);
            let seed = splitmix(opts.seed ^ splitmix((class as u64) << 32 | i as u64));
            let base = render_slide(class, opts.width, opts.height, seed)?;
            let mut levels = pyramid_levels(&base, 3);
            if levels.len() == 3 {
                levels.remove(1);
            }
            let path = dir.join(format!("{id}.tif"));
            let description = format!("Aperio Image Library synthetic {}x{} |AppMag = {SYNTH_MAGNIFICATION}|MPP = 0.25", opts.width, opts.height);
            write_pyramid(&path, &levels, &description, &TiffWriteOptions::default())?;
            entries.push(SlideEntry {
                path,
                class_label: class,
                magnification: None,
            });
        }
    }
    let list = std::fs::File::create(dir.join("slides.tsv"))?;
    write_slide_list(std::io::BufWriter::new(list), &entries, dir)?;
    Ok(entries)
}
