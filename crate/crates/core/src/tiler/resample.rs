//! Separable bicubic resampling (Keys kernel, a = -0.5) with clamp-to-edge borders.
//!
//! Output pixel `o` on an axis of source length `S` and output length `O` samples
//! the source at `(o + 0.5) * S / O - 0.5`. Any rectangle of the output can be
//! computed from the matching source window alone, and the result is bit-identical
//! to the same rectangle of a whole-image rescale.

use crate::raster::RgbImage;

use super::TilerError;

pub const KEYS_A: f64 = -0.5;

/// Keys cubic convolution kernel.
pub fn cubic_weight(t: f64) -> f64 {
    let a = KEYS_A;
    let x = t.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// `round(dim * scale)`, halves rounded away from zero.
pub fn scaled_dim(dim: usize, scale: f64) -> usize {
    (dim as f64 * scale).round() as usize
}

/// Source sample position of output index `o`.
pub fn source_coordinate(o: usize, src_len: usize, out_len: usize) -> f64 {
    (o as f64 + 0.5) * src_len as f64 / out_len as f64 - 0.5
}

/// Tap indices (clamped to the source) and weights for a run of output positions.
struct AxisTaps {
    indices: Vec<[usize; 4]>,
    weights: Vec<[f32; 4]>,
}

impl AxisTaps {
    fn new(src_len: usize, out_len: usize, out_start: usize, count: usize) -> Self {
        let last = src_len as i64 - 1;
        let mut indices = Vec::with_capacity(count);
        let mut weights = Vec::with_capacity(count);
        for o in out_start..out_start + count {
            let center = source_coordinate(o, src_len, out_len);
            let base = center.floor();
            let t = center - base;
            let base = base as i64;
            let mut idx = [0usize; 4];
            let mut w = [0f32; 4];
            for k in 0..4 {
                idx[k] = (base - 1 + k as i64).clamp(0, last) as usize;
                w[k] = cubic_weight(t + 1.0 - k as f64) as f32;
            }
            indices.push(idx);
            weights.push(w);
        }
        Self { indices, weights }
    }

    /// Inclusive range of source indices touched.
    fn span(&self) -> (usize, usize) {
        let lo = self.indices.iter().map(|i| i[0]).min().unwrap_or(0);
        let hi = self.indices.iter().map(|i| i[3]).max().unwrap_or(0);
        (lo, hi)
    }
}

/// A rectangle of a rescaled image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Plans the computation of one output rectangle of a `src_w × src_h → out_w × out_h`
/// rescale.
pub struct WindowPlan {
    x_taps: AxisTaps,
    y_taps: AxisTaps,
    rect: OutputRect,
}

impl WindowPlan {
    pub fn new(src_w: usize, src_h: usize, out_w: usize, out_h: usize, rect: OutputRect) -> Self {
        Self {
            x_taps: AxisTaps::new(src_w, out_w, rect.x, rect.width),
            y_taps: AxisTaps::new(src_h, out_h, rect.y, rect.height),
            rect,
        }
    }

    /// Source rectangle `(x, y, width, height)` the window needs.
    pub fn source_window(&self) -> (usize, usize, usize, usize) {
        let (x0, x1) = self.x_taps.span();
        let (y0, y1) = self.y_taps.span();
        (x0, y0, x1 - x0 + 1, y1 - y0 + 1)
    }

    /// Resamples from `window`, which must be exactly [`Self::source_window`].
    pub fn apply(&self, window: &RgbImage) -> RgbImage {
        let (wx, wy, ww, wh) = self.source_window();
        debug_assert_eq!((window.width, window.height), (ww, wh));
        let out_w = self.rect.width;

        // horizontal pass over every window row
        let mut rows = vec![0f32; wh * out_w * 3];
        for r in 0..wh {
            let src_row = &window.pixels[r * ww * 3..(r + 1) * ww * 3];
            let dst = &mut rows[r * out_w * 3..(r + 1) * out_w * 3];
            for (o, (idx, w)) in self.x_taps.indices.iter().zip(&self.x_taps.weights).enumerate() {
                for c in 0..3 {
                    let mut acc = 0f32;
                    for k in 0..4 {
                        acc += w[k] * f32::from(src_row[(idx[k] - wx) * 3 + c]);
                    }
                    dst[o * 3 + c] = acc;
                }
            }
        }

        let mut pixels = vec![0u8; self.rect.height * out_w * 3];
        for (o, (idx, w)) in self.y_taps.indices.iter().zip(&self.y_taps.weights).enumerate() {
            let dst = &mut pixels[o * out_w * 3..(o + 1) * out_w * 3];
            for (i, out) in dst.iter_mut().enumerate() {
                let mut acc = 0f32;
                for k in 0..4 {
                    acc += w[k] * rows[(idx[k] - wy) * out_w * 3 + i];
                }
                *out = acc.round().clamp(0.0, 255.0) as u8;
            }
        }
        RgbImage {
            width: out_w,
            height: self.rect.height,
            pixels,
        }
    }
}

/// Rescales a whole image by `scale`; output dims are `round(dims × scale)`.
pub fn rescale_bicubic(image: &RgbImage, scale: f64) -> Result<RgbImage, TilerError> {
    if image.is_empty() {
        return Err(TilerError::EmptyImage);
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(TilerError::InvalidScale(scale));
    }
    let out_w = scaled_dim(image.width, scale);
    let out_h = scaled_dim(image.height, scale);
    resize_bicubic(image, out_w, out_h)
}

/// Resamples a whole image to explicit output dimensions.
pub fn resize_bicubic(image: &RgbImage, out_w: usize, out_h: usize) -> Result<RgbImage, TilerError> {
    if image.is_empty() || out_w == 0 || out_h == 0 {
        return Err(TilerError::EmptyImage);
    }
    let rect = OutputRect {
        x: 0,
        y: 0,
        width: out_w,
        height: out_h,
    };
    let plan = WindowPlan::new(image.width, image.height, out_w, out_h, rect);
    let (x, y, w, h) = plan.source_window();
    if (x, y, w, h) == (0, 0, image.width, image.height) {
        Ok(plan.apply(image))
    } else {
        Ok(plan.apply(&image.crop(x, y, w, h)))
    }
}
