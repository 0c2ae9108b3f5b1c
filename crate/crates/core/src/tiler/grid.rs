/// A centered grid of non-overlapping square tiles on a rescaled image. The
/// remainder that does not fill a whole tile is split between opposite margins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileGrid {
    pub tile_size_px: usize,
    pub columns: usize,
    pub rows: usize,
    pub origin_x: usize,
    pub origin_y: usize,
    pub scaled_width: usize,
    pub scaled_height: usize,
}

/// Panics when `tile_size_px` is zero.
pub fn plan_grid(scaled_width: usize, scaled_height: usize, tile_size_px: usize) -> TileGrid {
    assert!(tile_size_px >= 1, "tile size must be positive");
    let columns = scaled_width / tile_size_px;
    let rows = scaled_height / tile_size_px;
    TileGrid {
        tile_size_px,
        columns,
        rows,
        origin_x: (scaled_width - columns * tile_size_px) / 2,
        origin_y: (scaled_height - rows * tile_size_px) / 2,
        scaled_width,
        scaled_height,
    }
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.columns * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-left corner of tile (column, row) in rescaled coordinates.
    pub fn tile_origin(&self, column: usize, row: usize) -> (usize, usize) {
        (
            self.origin_x + column * self.tile_size_px,
            self.origin_y + row * self.tile_size_px,
        )
    }

    /// Tile origins in row-major order.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows).flat_map(move |r| (0..self.columns).map(move |c| self.tile_origin(c, r)))
    }
}
