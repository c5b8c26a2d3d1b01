//! Tile-grid extraction over detected tissue.

use super::tissue::TissueMask;
use super::{SlideRaster, LABEL_LESION};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// One retained tile: grid position, pixel origin, and ground-truth fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileRef {
    pub row: usize,
    pub col: usize,
    pub x: usize,
    pub y: usize,
    pub tissue_frac: f32,
    pub lesion_frac: f32,
}

/// Non-overlapping grid of retained tiles, row-major.
#[derive(Debug, Clone)]
pub struct TileGrid {
    pub tile_size: usize,
    pub stride: usize,
    /// Grid dimensions before filtering (rows, cols).
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub tiles: Vec<TileRef>,
}

/// A tile's pixels: `tile_size x tile_size x 3` interleaved RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct TileImage {
    pub size: usize,
    pub pixels: Vec<u8>,
}

/// Extract the fixed grid (stride = tile size) and keep tiles whose detected
/// tissue fraction reaches `min_tissue_fraction`. Ground-truth lesion
/// fraction per tile comes from the raster's label mask when present.
pub fn extract_grid(
    raster: &SlideRaster,
    mask: &TissueMask,
    tile_size: usize,
    min_tissue_fraction: f64,
) -> Result<TileGrid> {
    if tile_size == 0 || raster.width < tile_size || raster.height < tile_size {
        return Err(Error::Data(format!(
            "raster {}x{} smaller than one {tile_size} px tile",
            raster.width, raster.height
        )));
    }
    if mask.width != raster.width || mask.height != raster.height {
        return Err(Error::shape(format!(
            "mask {}x{} does not match raster {}x{}",
            mask.width, mask.height, raster.width, raster.height
        )));
    }
    let rows = raster.height / tile_size;
    let cols = raster.width / tile_size;
    let area = (tile_size * tile_size) as f64;
    let mut tiles = Vec::new();
    for row in 0..rows {
        for col in 0..cols {
            let (x0, y0) = (col * tile_size, row * tile_size);
            let mut tissue = 0usize;
            let mut lesion = 0usize;
            for y in y0..y0 + tile_size {
                let mrow = &mask.data[y * raster.width + x0..y * raster.width + x0 + tile_size];
                tissue += mrow.iter().filter(|&&b| b).count();
                if let Some(labels) = &raster.label_mask {
                    let lrow = &labels[y * raster.width + x0..y * raster.width + x0 + tile_size];
                    lesion += lrow.iter().filter(|&&l| l == LABEL_LESION).count();
                }
            }
            let tissue_frac = tissue as f64 / area;
            if tissue_frac >= min_tissue_fraction {
                tiles.push(TileRef {
                    row,
                    col,
                    x: x0,
                    y: y0,
                    tissue_frac: tissue_frac as f32,
                    lesion_frac: (lesion as f64 / area) as f32,
                });
            }
        }
    }
    Ok(TileGrid { tile_size, stride: tile_size, grid_rows: rows, grid_cols: cols, tiles })
}

/// Cap the grid at `max_tiles` by uniform sampling without replacement.
/// Grids at or under the cap pass through unchanged; sampled grids keep
/// row-major order.
pub fn sample_tiles(grid: &TileGrid, max_tiles: usize, seed: u64) -> TileGrid {
    assert!(max_tiles >= 1, "max_tiles must be at least 1");
    if grid.tiles.len() <= max_tiles {
        return grid.clone();
    }
    let mut rng = Rng::stream(seed, "tile.sample");
    let keep = rng.sample_indices(grid.tiles.len(), max_tiles);
    let tiles = keep.iter().map(|&i| grid.tiles[i]).collect();
    TileGrid { tiles, ..grid.clone() }
}

/// Copy one tile's pixels out of the raster.
pub fn read_tile(raster: &SlideRaster, tile: &TileRef, tile_size: usize) -> Result<TileImage> {
    if tile.x + tile_size > raster.width || tile.y + tile_size > raster.height {
        return Err(Error::Data(format!(
            "tile at ({}, {}) exceeds raster bounds {}x{}",
            tile.x, tile.y, raster.width, raster.height
        )));
    }
    let mut pixels = Vec::with_capacity(tile_size * tile_size * 3);
    for y in tile.y..tile.y + tile_size {
        let start = (y * raster.width + tile.x) * 3;
        pixels.extend_from_slice(&raster.pixels[start..start + tile_size * 3]);
    }
    Ok(TileImage { size: tile_size, pixels })
}

/// A slide is positive when any tile carries lesion ground truth.
pub fn slide_label_from_grid(grid: &TileGrid) -> bool {
    grid.tiles.iter().any(|t| t.lesion_frac > 0.0)
}
