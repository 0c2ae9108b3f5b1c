//! Rescaling slides to a target magnification and cutting them into a centered
//! grid of fixed-size tiles.
//!
//! [`extract_tiles`] never materializes the rescaled level: each tile is computed
//! from just the source window its bicubic taps reach, one grid row at a time.

mod grid;
pub mod resample;

use rayon::prelude::*;
use thiserror::Error;

use crate::raster::RgbImage;
use crate::wsi::{SlidePyramid, WsiError};
pub use grid::{plan_grid, TileGrid};
pub use resample::{rescale_bicubic, resize_bicubic, OutputRect, WindowPlan};

/// Relative slack when comparing magnifications derived from integer widths.
const MAG_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TilerError {
    #[error("image is empty")]
    EmptyImage,
    #[error("invalid scale factor {0}")]
    InvalidScale(f64),
    #[error("target magnification {0} cannot be served by this slide")]
    MagnificationUnavailable(f64),
    #[error("target magnification {target} exceeds the finest level ({available}); upsampling refused")]
    UpsamplingRefused { target: f64, available: f64 },
    #[error("tile size must be positive")]
    InvalidTileSize,
    #[error(transparent)]
    Wsi(#[from] WsiError),
}

#[derive(Debug, Clone, Copy)]
pub struct TileOptions {
    pub target_magnification: f64,
    pub tile_size_px: usize,
    pub allow_upsampling: bool,
}

impl Default for TileOptions {
    fn default() -> Self {
        Self {
            target_magnification: 20.0,
            tile_size_px: 1024,
            allow_upsampling: false,
        }
    }
}

/// Where a tile came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TilePlacement {
    pub slide_id: String,
    /// Stored level the tile was resampled from.
    pub level: usize,
    /// Top-left corner in rescaled-image coordinates.
    pub origin_x: usize,
    pub origin_y: usize,
    pub tile_size_px: usize,
    pub magnification: f64,
}

/// The level / scale decision for a slide.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalePlan {
    pub level: usize,
    pub level_magnification: f64,
    pub scale: f64,
    pub grid: TileGrid,
}

/// Chooses the stored level whose magnification is the smallest one at or above
/// the target, and the grid on the rescaled plane.
pub fn plan_scale(slide: &SlidePyramid, opts: &TileOptions) -> Result<ScalePlan, TilerError> {
    let target = opts.target_magnification;
    if !(target > 0.0 && target.is_finite()) || !(slide.native_magnification > 0.0) {
        return Err(TilerError::MagnificationUnavailable(target));
    }
    if opts.tile_size_px == 0 {
        return Err(TilerError::InvalidTileSize);
    }
    let candidate = (0..slide.levels.len())
        .filter(|&l| slide.level_magnification(l) >= target * (1.0 - MAG_EPS))
        .min_by(|&a, &b| {
            slide
                .level_magnification(a)
                .total_cmp(&slide.level_magnification(b))
        });
    let level = match candidate {
        Some(level) => level,
        None if opts.allow_upsampling => 0,
        None => {
            return Err(TilerError::UpsamplingRefused {
                target,
                available: slide.level_magnification(0),
            })
        }
    };
    let level_magnification = slide.level_magnification(level);
    let mut scale = target / level_magnification;
    if (scale - 1.0).abs() < MAG_EPS {
        scale = 1.0;
    }
    let info = &slide.levels[level];
    let scaled_width = resample::scaled_dim(info.width_px, scale);
    let scaled_height = resample::scaled_dim(info.height_px, scale);
    Ok(ScalePlan {
        level,
        level_magnification,
        scale,
        grid: plan_grid(scaled_width, scaled_height, opts.tile_size_px),
    })
}

/// Row-major stream of tiles. Tiles within a grid row are computed in parallel
/// and delivered in order.
pub struct TileStream<'a> {
    slide: &'a SlidePyramid,
    plan: ScalePlan,
    magnification: f64,
    next_row: usize,
    buffered: std::vec::IntoIter<Result<(TilePlacement, RgbImage), TilerError>>,
    failed: bool,
}

impl TileStream<'_> {
    pub fn plan(&self) -> &ScalePlan {
        &self.plan
    }

    fn fill_row(&mut self) {
        let grid = self.plan.grid;
        let row = self.next_row;
        self.next_row += 1;
        let tiles: Vec<_> = (0..grid.columns)
            .into_par_iter()
            .map(|col| {
                let (ox, oy) = grid.tile_origin(col, row);
                let image = render_tile(self.slide, &self.plan, ox, oy)?;
                let placement = TilePlacement {
                    slide_id: self.slide.slide_id.clone(),
                    level: self.plan.level,
                    origin_x: ox,
                    origin_y: oy,
                    tile_size_px: grid.tile_size_px,
                    magnification: self.magnification,
                };
                Ok((placement, image))
            })
            .collect();
        self.buffered = tiles.into_iter();
    }
}

impl Iterator for TileStream<'_> {
    type Item = Result<(TilePlacement, RgbImage), TilerError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            if let Some(item) = self.buffered.next() {
                self.failed = item.is_err();
                return Some(item);
            }
            if self.next_row >= self.plan.grid.rows || self.plan.grid.columns == 0 {
                return None;
            }
            self.fill_row();
        }
    }
}

/// Computes one tile of the rescaled level from the source window it needs.
fn render_tile(slide: &SlidePyramid, plan: &ScalePlan, ox: usize, oy: usize) -> Result<RgbImage, TilerError> {
    let info = &slide.levels[plan.level];
    let size = plan.grid.tile_size_px;
    if plan.scale == 1.0 {
        return Ok(slide.read_region(plan.level, ox, oy, size, size)?.into_image());
    }
    let window = WindowPlan::new(
        info.width_px,
        info.height_px,
        plan.grid.scaled_width,
        plan.grid.scaled_height,
        OutputRect {
            x: ox,
            y: oy,
            width: size,
            height: size,
        },
    );
    let (sx, sy, sw, sh) = window.source_window();
    let source = slide.read_region(plan.level, sx, sy, sw, sh)?.into_image();
    Ok(window.apply(&source))
}

/// Streams every grid tile of `slide` rescaled to the target magnification.
pub fn extract_tiles<'a>(slide: &'a SlidePyramid, opts: &TileOptions) -> Result<TileStream<'a>, TilerError> {
    let plan = plan_scale(slide, opts)?;
    Ok(TileStream {
        slide,
        plan,
        magnification: opts.target_magnification,
        next_row: 0,
        buffered: Vec::new().into_iter(),
        failed: false,
    })
}
