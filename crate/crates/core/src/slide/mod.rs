//! Synthetic slide generation, tissue detection, and tile-grid extraction.

pub mod grid;
pub mod manifest;
pub mod png_io;
pub mod synth;
pub mod tissue;

pub use grid::{extract_grid, read_tile, sample_tiles, TileGrid, TileImage, TileRef};
pub use manifest::{CorpusManifest, SlideRecord};
pub use synth::{generate_abstract_slide, generate_synthetic_slide, SyntheticSlideSpec};
pub use tissue::{detect_tissue, TissueMask};

use crate::error::{Error, Result};

/// Mask label values.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_TISSUE: u8 = 1;
pub const LABEL_LESION: u8 = 2;

/// The default edge length of extracted tiles, in pixels.
pub const TILE_SIZE: usize = 224;

/// An RGB raster with optional per-pixel ground-truth labels.
#[derive(Debug, Clone)]
pub struct SlideRaster {
    pub width: usize,
    pub height: usize,
    pub microns_per_pixel: f64,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
    /// Per-pixel class labels (background / tissue / lesion), same dims.
    pub label_mask: Option<Vec<u8>>,
}

impl SlideRaster {
    pub fn new(
        width: usize,
        height: usize,
        microns_per_pixel: f64,
        pixels: Vec<u8>,
        label_mask: Option<Vec<u8>>,
    ) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "pixel buffer {} != {width}x{height}x3",
                pixels.len()
            )));
        }
        if let Some(m) = &label_mask {
            if m.len() != width * height {
                return Err(Error::shape(format!("label mask {} != {width}x{height}", m.len())));
            }
        }
        Ok(SlideRaster { width, height, microns_per_pixel, pixels, label_mask })
    }

    #[inline]
    pub fn rgb_at(&self, x: usize, y: usize) -> (u8, u8, u8) {
        let i = (y * self.width + x) * 3;
        (self.pixels[i], self.pixels[i + 1], self.pixels[i + 2])
    }

    /// Bilinear resample to a different physical resolution. A raster at
    /// 0.25 mpp resampled to 0.5 mpp halves in edge length.
    pub fn resample_to_mpp(&self, target_mpp: f64) -> Result<SlideRaster> {
        if target_mpp <= 0.0 || self.microns_per_pixel <= 0.0 {
            return Err(Error::Config("microns-per-pixel must be positive".into()));
        }
        let scale = self.microns_per_pixel / target_mpp;
        let nw = ((self.width as f64) * scale).round().max(1.0) as usize;
        let nh = ((self.height as f64) * scale).round().max(1.0) as usize;
        let mut out = vec![0u8; nw * nh * 3];
        for y in 0..nh {
            let sy = ((y as f64 + 0.5) / scale - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = sy - y0 as f64;
            for x in 0..nw {
                let sx = ((x as f64 + 0.5) / scale - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = sx - x0 as f64;
                for c in 0..3 {
                    let p00 = self.pixels[(y0 * self.width + x0) * 3 + c] as f64;
                    let p01 = self.pixels[(y0 * self.width + x1) * 3 + c] as f64;
                    let p10 = self.pixels[(y1 * self.width + x0) * 3 + c] as f64;
                    let p11 = self.pixels[(y1 * self.width + x1) * 3 + c] as f64;
                    let v = p00 * (1.0 - fx) * (1.0 - fy)
                        + p01 * fx * (1.0 - fy)
                        + p10 * (1.0 - fx) * fy
                        + p11 * fx * fy;
                    out[(y * nw + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        SlideRaster::new(nw, nh, target_mpp, out, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resample_halves_edge_length_and_preserves_flat_color() {
        let (w, h) = (64, 48);
        let mut pixels = Vec::with_capacity(w * h * 3);
        for _ in 0..w * h {
            pixels.extend_from_slice(&[120, 80, 200]);
        }
        let raster = SlideRaster::new(w, h, 0.25, pixels, None).unwrap();
        let out = raster.resample_to_mpp(0.5).unwrap();
        assert_eq!((out.width, out.height), (32, 24));
        assert!(out.pixels.chunks(3).all(|p| p == [120, 80, 200]));
        assert!((out.microns_per_pixel - 0.5).abs() < 1e-12);
    }

    #[test]
    fn resample_gradient_stays_monotone() {
        let (w, h) = (40, 8);
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let v = (x * 255 / (w - 1)) as u8;
                pixels.extend_from_slice(&[v, v, v]);
                let _ = y;
            }
        }
        let raster = SlideRaster::new(w, h, 1.0, pixels, None).unwrap();
        let out = raster.resample_to_mpp(2.0).unwrap();
        let row: Vec<u8> = (0..out.width).map(|x| out.pixels[x * 3]).collect();
        assert!(row.windows(2).all(|p| p[0] <= p[1]), "{row:?}");
    }
}
