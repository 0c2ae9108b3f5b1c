//! Fixture generators and independent oracles shared by the integration tests.
//!
//! Every checker returns a measurement rather than asserting, so the acceptance
//! runner can print it next to the tolerance.
#![allow(dead_code)]

use std::panic::{catch_unwind, AssertUnwindSafe};

use histotile_core::cnn::layers::{
    bce_with_logits, conv3x3_backward, conv3x3_forward, dense_backward, dense_forward, maxpool2_backward,
    maxpool2_forward, relu_backward, relu_forward,
};
use histotile_core::cnn::{Network, NetworkConfig};
use histotile_core::raster::{encode_ppm, RgbImage};
use histotile_core::stain::{estimate_stain_matrix, Normalizer, DEFAULT_ALPHA, DEFAULT_BETA};
use histotile_core::tiler::{extract_tiles, plan_grid, rescale_bicubic, TileOptions};
use histotile_core::wsi::writer::{encode_pyramid, pyramid_levels, TiffWriteOptions};
use histotile_core::wsi::{open_slide_bytes, Compression, Endianness};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smooth gradients plus noise, so resampling sees both edges and ramps.
pub fn random_image(rng: &mut ChaCha8Rng, width: usize, height: usize) -> RgbImage {
    let mut img = RgbImage::filled(width, height, [0, 0, 0]);
    let f: [f64; 6] = std::array::from_fn(|_| rng.gen_range(0.02..0.4));
    for y in 0..height {
        for x in 0..width {
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let wave = ((x as f64 * f[c]).sin() + (y as f64 * f[c + 3]).cos()) * 60.0 + 128.0;
                *v = (wave + rng.gen_range(-40.0..40.0)).clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x, y, px);
        }
    }
    img
}

pub const DESCRIPTION: &str = "Aperio Image Library v12.0.0\n46000x32914 -> 1024x739 |AppMag = 40|MPP = 0.2520";

/// All eight writer layouts: byte order × classic/BigTIFF × raw/deflate.
pub fn all_layouts(tile_size: usize) -> Vec<TiffWriteOptions> {
    let mut out = Vec::new();
    for endianness in [Endianness::Little, Endianness::Big] {
        for bigtiff in [false, true] {
            for compression in [Compression::None, Compression::Deflate] {
                out.push(TiffWriteOptions { endianness, bigtiff, compression, tile_size });
            }
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct RoundTrip {
    pub fixtures: usize,
    pub exact: usize,
    pub failures: Vec<String>,
}

/// Writes random pyramids in every layout, reads every level back in full and
/// compares bytes. A fixture counts as exact only if all its levels match.
pub fn reader_round_trip(seed: u64, per_layout: usize) -> RoundTrip {
    let mut rng = rng(seed);
    let mut report = RoundTrip::default();
    for opts in all_layouts(32) {
        for _ in 0..per_layout {
            report.fixtures += 1;
            let w = rng.gen_range(40..220);
            let h = rng.gen_range(40..180);
            let levels = pyramid_levels(&random_image(&mut rng, w, h), 3);
            let label = format!("{opts:?} {w}x{h}");
            let bytes = match encode_pyramid(&levels, DESCRIPTION, &opts) {
                Ok(b) => b,
                Err(e) => {
                    report.failures.push(format!("{label}: write {e}"));
                    continue;
                }
            };
            let slide = match open_slide_bytes(bytes, "fixture", None) {
                Ok(s) => s,
                Err(e) => {
                    report.failures.push(format!("{label}: open {e}"));
                    continue;
                }
            };
            let mut ok = slide.levels.len() == levels.len() && slide.native_magnification == 40.0;
            for (i, level) in levels.iter().enumerate().take(slide.levels.len()) {
                ok &= slide
                    .read_region(i, 0, 0, level.width, level.height)
                    .is_ok_and(|r| r.into_image() == *level);
            }
            if ok {
                report.exact += 1;
            } else {
                report.failures.push(label);
            }
        }
    }
    report
}

/// Random windows read through the tile index against direct crops of the source.
pub fn crop_mismatches(seed: u64, windows: usize) -> usize {
    let mut rng = rng(seed);
    let mut bad = 0;
    for opts in all_layouts(16) {
        let base = random_image(&mut rng, 150, 97);
        let levels = pyramid_levels(&base, 2);
        let slide = open_slide_bytes(encode_pyramid(&levels, DESCRIPTION, &opts).unwrap(), "crop", None).unwrap();
        for _ in 0..windows {
            let l = rng.gen_range(0..levels.len());
            let img = &levels[l];
            let x = rng.gen_range(0..img.width);
            let y = rng.gen_range(0..img.height);
            let w = rng.gen_range(1..=img.width - x);
            let h = rng.gen_range(1..=img.height - y);
            if !slide.read_region(l, x, y, w, h).is_ok_and(|r| r.into_image() == img.crop(x, y, w, h)) {
                bad += 1;
            }
        }
    }
    bad
}

#[derive(Debug, Default)]
pub struct FuzzReport {
    pub runs: usize,
    pub opened: usize,
    pub panics: usize,
}

fn mutate(rng: &mut ChaCha8Rng, bytes: &mut Vec<u8>) {
    let len = bytes.len();
    match rng.gen_range(0..6) {
        0 => {
            for _ in 0..rng.gen_range(1..8) {
                let i = rng.gen_range(0..len);
                bytes[i] ^= 1 << rng.gen_range(0..8);
            }
        }
        1 => {
            for _ in 0..rng.gen_range(1..16) {
                let i = rng.gen_range(0..len);
                bytes[i] = rng.gen();
            }
        }
        2 => bytes.truncate(rng.gen_range(0..len)),
        3 => {
            // the directories sit at the end of the file; hit them with extreme words
            let tail = len.saturating_sub(600);
            for _ in 0..rng.gen_range(1..4) {
                let i = rng.gen_range(tail..len.saturating_sub(4));
                let word = [0u32, 1, 0xFFFF, 0x7FFF_FFFF, u32::MAX, rng.gen()][rng.gen_range(0..6)];
                bytes[i..i + 4].copy_from_slice(&word.to_le_bytes());
            }
        }
        4 => {
            let i = rng.gen_range(0..16.min(len));
            bytes[i] = rng.gen();
        }
        _ => {
            let i = rng.gen_range(0..len);
            let n = rng.gen_range(1..64).min(len - i);
            bytes.drain(i..i + n);
        }
    }
}

/// Mutates valid fixtures and exercises open plus bounded region reads. A panic
/// anywhere counts as a crash; returned errors are the expected outcome.
pub fn fuzz_reader(seed: u64, runs: usize) -> FuzzReport {
    let mut rng = rng(seed);
    let seeds: Vec<Vec<u8>> = all_layouts(16)
        .iter()
        .map(|opts| {
            let levels = pyramid_levels(&random_image(&mut rng, 70, 45), 2);
            encode_pyramid(&levels, DESCRIPTION, opts).unwrap()
        })
        .collect();
    let mut report = FuzzReport::default();
    for _ in 0..runs {
        let mut bytes = seeds[rng.gen_range(0..seeds.len())].clone();
        for _ in 0..rng.gen_range(1..4) {
            if !bytes.is_empty() {
                mutate(&mut rng, &mut bytes);
            }
        }
        report.runs += 1;
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            let Ok(slide) = open_slide_bytes(bytes, "fuzz", Some(40.0)) else {
                return false;
            };
            for (l, info) in slide.levels.iter().enumerate() {
                let (w, h) = (info.width_px.min(48), info.height_px.min(48));
                let _ = slide.read_region(l, 0, 0, w, h);
                let _ = slide.read_region(l, info.width_px - w, info.height_px - h, w, h);
            }
            true
        }));
        match outcome {
            Ok(true) => report.opened += 1,
            Ok(false) => {}
            Err(_) => report.panics += 1,
        }
    }
    report
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x / n)
}

fn angle(a: [f64; 3], b: [f64; 3]) -> f64 {
    let (a, b) = (unit(a), unit(b));
    (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0).acos()
}

/// Pixels mixed from two known stain directions by Beer-Lambert.
pub struct StainCase {
    pub pixels: Vec<u8>,
    pub hematoxylin: [f64; 3],
    pub eosin: [f64; 3],
}

pub fn two_stain_image(rng: &mut ChaCha8Rng, n_pixels: usize) -> StainCase {
    let jitter = |rng: &mut ChaCha8Rng, v: [f64; 3]| unit(v.map(|x| x + rng.gen_range(-0.08..0.08))).map(f64::abs);
    let hematoxylin = jitter(rng, [0.65, 0.70, 0.29]);
    let eosin = jitter(rng, [0.22, 0.80, 0.56]);
    let mut pixels = Vec::with_capacity(n_pixels * 3);
    for _ in 0..n_pixels {
        let (ch, ce) = match rng.gen_range(0..10) {
            0..=2 => (rng.gen_range(0.8..1.3), 0.0),
            3..=5 => (0.0, rng.gen_range(0.8..1.3)),
            6..=8 => (rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0)),
            _ => (rng.gen_range(0.0..0.02), rng.gen_range(0.0..0.02)),
        };
        for c in 0..3 {
            let od = hematoxylin[c] * ch + eosin[c] * ce;
            pixels.push((255.0 * 10f64.powf(-od)).round().clamp(0.0, 255.0) as u8);
        }
    }
    StainCase { pixels, hematoxylin, eosin }
}

#[derive(Debug, Default)]
pub struct StainReport {
    pub images: usize,
    pub failed_estimates: usize,
    /// Largest column angle over all images, radians.
    pub max_angle: f64,
    /// Largest per-image mean absolute change under self-normalization.
    pub max_self_change: f64,
}

pub fn stain_oracle(seed: u64, images: usize) -> StainReport {
    let mut rng = rng(seed);
    let mut report = StainReport::default();
    for _ in 0..images {
        report.images += 1;
        let case = two_stain_image(&mut rng, 64 * 64);
        let Ok(profile) = estimate_stain_matrix(&case.pixels, DEFAULT_BETA, DEFAULT_ALPHA) else {
            report.failed_estimates += 1;
            continue;
        };
        let err = angle(profile.column(0), case.hematoxylin).max(angle(profile.column(1), case.eosin));
        report.max_angle = report.max_angle.max(err);
        let out = Normalizer::new(&profile, &profile).unwrap().apply(&case.pixels);
        let change = out
            .iter()
            .zip(&case.pixels)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
            .sum::<f64>()
            / out.len() as f64;
        report.max_self_change = report.max_self_change.max(change);
    }
    report
}

/// Keys cubic convolution, a = -0.5, written out per piece.
fn keys(t: f64) -> f64 {
    let x = t.abs();
    if x < 1.0 {
        1.5 * x * x * x - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// Direct 4×4 neighbourhood sum per output pixel, edges clamped, pixel centers
/// aligned, no separable intermediate.
pub fn oracle_rescale(src: &RgbImage, scale: f64) -> RgbImage {
    let ow = (src.width as f64 * scale).round() as usize;
    let oh = (src.height as f64 * scale).round() as usize;
    let mut out = RgbImage::filled(ow, oh, [0, 0, 0]);
    let clamp = |v: i64, len: usize| v.clamp(0, len as i64 - 1) as usize;
    for oy in 0..oh {
        let sy = (oy as f64 + 0.5) * src.height as f64 / oh as f64 - 0.5;
        for ox in 0..ow {
            let sx = (ox as f64 + 0.5) * src.width as f64 / ow as f64 - 0.5;
            let mut acc = [0.0f64; 3];
            for j in sy.floor() as i64 - 1..=sy.floor() as i64 + 2 {
                for i in sx.floor() as i64 - 1..=sx.floor() as i64 + 2 {
                    let wgt = keys(sx - i as f64) * keys(sy - j as f64);
                    let p = src.pixel(clamp(i, src.width), clamp(j, src.height));
                    for c in 0..3 {
                        acc[c] += wgt * f64::from(p[c]);
                    }
                }
            }
            out.put_pixel(ox, oy, acc.map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    out
}

/// Largest channel difference between the library rescale and the oracle.
pub fn tiler_oracle(seed: u64, images: usize) -> u8 {
    let mut rng = rng(seed);
    let mut worst = 0u8;
    for _ in 0..images {
        let (w, h) = (rng.gen_range(8..90), rng.gen_range(8..90));
        let src = random_image(&mut rng, w, h);
        let scale = [0.25, 0.5, 0.37, 0.8, 1.6, 2.0][rng.gen_range(0..6)];
        let got = rescale_bicubic(&src, scale).unwrap();
        let want = oracle_rescale(&src, scale);
        assert_eq!((got.width, got.height), (want.width, want.height));
        for (a, b) in got.pixels.iter().zip(&want.pixels) {
            worst = worst.max(a.abs_diff(*b));
        }
    }
    worst
}

/// Random (W, H, T) whose grid size differs from floor(W/T)·floor(H/T).
pub fn grid_count_mismatches(seed: u64, cases: usize) -> usize {
    let mut rng = rng(seed);
    (0..cases)
        .filter(|_| {
            let w = rng.gen_range(0..100_000);
            let h = rng.gen_range(0..100_000);
            let t = rng.gen_range(1..5000);
            plan_grid(w, h, t).len() != (w / t) * (h / t)
        })
        .count()
}

/// Tiles a slide at half its native magnification, pastes the tiles back and
/// compares with the centered crop of a whole-image rescale. Returns the number
/// of differing bytes and the tile count.
pub fn reassembly_mismatch(seed: u64, from_tiff: bool) -> (usize, usize) {
    let mut rng = rng(seed);
    let base = random_image(&mut rng, 203, 151);
    let bytes = if from_tiff {
        let opts = TiffWriteOptions { tile_size: 32, ..Default::default() };
        encode_pyramid(std::slice::from_ref(&base), DESCRIPTION, &opts).unwrap()
    } else {
        encode_ppm(&base)
    };
    let slide = open_slide_bytes(bytes, "reassembly", Some(40.0)).unwrap();
    let opts = TileOptions { target_magnification: 20.0, tile_size_px: 24, allow_upsampling: false };
    let stream = extract_tiles(&slide, &opts).unwrap();
    let grid = stream.plan().grid;
    let whole = rescale_bicubic(&base, 0.5).unwrap();
    let t = grid.tile_size_px;
    let mut canvas = RgbImage::filled(grid.columns * t, grid.rows * t, [0, 0, 0]);
    let mut count = 0;
    for item in stream {
        let (placement, tile) = item.unwrap();
        canvas.blit(&tile, placement.origin_x - grid.origin_x, placement.origin_y - grid.origin_y);
        count += 1;
    }
    let crop = whole.crop(grid.origin_x, grid.origin_y, canvas.width, canvas.height);
    let diff = canvas.pixels.iter().zip(&crop.pixels).filter(|(a, b)| a != b).count();
    (diff, count)
}

/// Central finite differences against an analytic gradient; returns the
/// largest relative error.
pub fn max_relative_error(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    let h = 1e-6;
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-7);
        worst = worst.max(err);
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per layer type, the worst relative error over inputs and parameters. Each
/// layer is checked through the scalar `sum(r ⊙ y)` for a fixed random `r`.
pub fn layer_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = rng(seed);
    let mut out = Vec::new();

    let (n, h, w, cin, cout) = (2, 5, 4, 3, 4);
    let x = uniform(&mut rng, n * h * w * cin);
    let wt = uniform(&mut rng, 9 * cin * cout);
    let b = uniform(&mut rng, cout);
    let r = uniform(&mut rng, n * h * w * cout);
    let (dw, db, dx) = conv3x3_backward(&x, n, h, w, cin, &wt, cout, &r, true);
    let e_x = max_relative_error(&|p| dot(&conv3x3_forward(p, n, h, w, cin, &wt, &b, cout), &r), &x, &dx.unwrap());
    let e_w = max_relative_error(&|p| dot(&conv3x3_forward(&x, n, h, w, cin, p, &b, cout), &r), &wt, &dw);
    let e_b = max_relative_error(&|p| dot(&conv3x3_forward(&x, n, h, w, cin, &wt, p, cout), &r), &b, &db);
    out.push(("conv3x3", e_x.max(e_w).max(e_b)));

    // keep inputs away from the kink so the difference quotient is defined
    let x: Vec<f64> = uniform(&mut rng, 40)
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
        .collect();
    let r = uniform(&mut rng, 40);
    let e = max_relative_error(&|p| dot(&relu_forward(p), &r), &x, &relu_backward(&x, &r));
    out.push(("relu", e));

    // distinct values spaced far beyond the step, so the argmax cannot flip
    let (n, h, w, c) = (2, 4, 6, 3);
    let len = n * h * w * c;
    let mut x: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
    for i in (1..len).rev() {
        x.swap(i, rng.gen_range(0..=i));
    }
    let r = uniform(&mut rng, len / 4);
    let (_, arg) = maxpool2_forward(&x, n, h, w, c);
    let e = max_relative_error(
        &|p| dot(&maxpool2_forward(p, n, h, w, c).0, &r),
        &x,
        &maxpool2_backward(&r, &arg, len),
    );
    out.push(("maxpool2", e));

    let (n, fin, fout) = (3, 7, 5);
    let x = uniform(&mut rng, n * fin);
    let wt = uniform(&mut rng, fin * fout);
    let b = uniform(&mut rng, fout);
    let r = uniform(&mut rng, n * fout);
    let (dw, db, dx) = dense_backward(&x, n, fin, &wt, fout, &r, true);
    let e_x = max_relative_error(&|p| dot(&dense_forward(p, n, fin, &wt, &b, fout), &r), &x, &dx.unwrap());
    let e_w = max_relative_error(&|p| dot(&dense_forward(&x, n, fin, p, &b, fout), &r), &wt, &dw);
    let e_b = max_relative_error(&|p| dot(&dense_forward(&x, n, fin, &wt, p, fout), &r), &b, &db);
    out.push(("dense", e_x.max(e_w).max(e_b)));

    let z: Vec<f64> = uniform(&mut rng, 8).into_iter().map(|v| 3.0 * v).collect();
    let labels: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
    let e = max_relative_error(&|p| bce_with_logits(p, &labels).0, &z, &bce_with_logits(&z, &labels).1);
    out.push(("sigmoid+bce", e));
    out
}

#[derive(Debug, Default)]
pub struct ComposedCheck {
    pub max_error: f64,
    pub checked: usize,
    /// Probes skipped because a ReLU or pool switch lies within the step.
    pub kinks: usize,
}

/// Small full network in f64: sampled weights and all biases of every layer
/// against the loss difference quotient. A probe whose one-sided slopes
/// disagree straddles a non-differentiable point and is counted, not scored.
pub fn composed_gradient_check(seed: u64) -> ComposedCheck {
    let config = NetworkConfig { input_size: 32, width_scale: 1.0 / 16.0, fc_sizes: (6, 5) };
    let mut net = Network::<f64>::new(config, seed).unwrap();
    let mut rng = rng(seed + 1);
    for layer in &mut net.layers {
        for b in &mut layer.bias {
            *b = rng.gen_range(-0.1..0.1);
        }
    }
    // a larger output gain keeps the loss gradient well above rounding noise
    let out = net.layers.len() - 1;
    for w in &mut net.layers[out].weight {
        *w = rng.gen_range(-0.5..0.5);
    }
    let n = 2;
    let images: Vec<f64> = (0..n * net.config.image_len()).map(|_| rng.gen()).collect();
    let labels = [1.0, 0.0];
    let loss = |net: &Network<f64>| {
        let (logits, cache) = net.forward(&images, n).unwrap();
        net.backward(&cache, &logits, &labels).unwrap().loss
    };
    let (logits, cache) = net.forward(&images, n).unwrap();
    let grads = net.backward(&cache, &logits, &labels).unwrap();
    let base = grads.loss;
    // near the cube root of machine epsilon: rounding and truncation balance
    let h = 1e-5;
    let mut report = ComposedCheck::default();
    let names: Vec<String> = net.layers.iter().map(|l| l.name.clone()).collect();
    for name in names {
        let g = grads.get(&name).unwrap().clone();
        let wlen = g.weight.len();
        let mut probes: Vec<(bool, usize, f64)> =
            (0..wlen).step_by((wlen / 6).max(1)).map(|k| (false, k, g.weight[k])).collect();
        probes.extend(g.bias.iter().enumerate().map(|(k, &v)| (true, k, v)));
        for (bias, k, analytic) in probes {
            let mut at = |delta: f64| {
                let layer = net.layer_mut(&name).unwrap();
                let slot = if bias { &mut layer.bias[k] } else { &mut layer.weight[k] };
                *slot += delta;
                let value = loss(&net);
                let layer = net.layer_mut(&name).unwrap();
                let slot = if bias { &mut layer.bias[k] } else { &mut layer.weight[k] };
                *slot -= delta;
                value
            };
            let (up, down) = (at(h), at(-h));
            let (right, left) = ((up - base) / h, (base - down) / h);
            if (right - left).abs() > 1e-2 * right.abs().max(left.abs()).max(1e-7) {
                report.kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-7);
            report.max_error = report.max_error.max(err);
            report.checked += 1;
        }
    }
    report
}
