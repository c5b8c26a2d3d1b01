//! Tissue detection: Otsu luminance threshold plus 3x3 morphological opening.
//!
//! Two degenerate histograms need guards that plain Otsu cannot handle:
//! a near-uniform raster (no split exists) and a raster with no background
//! at all (Otsu would split the tissue texture itself). The guards use the
//! near-white background guaranteed by slide scanners: if the bright side of
//! the Otsu split is not white-ish, there is no background in frame.

use super::SlideRaster;

/// Luminance above which a pixel can be scanner background.
const WHITE_POINT: f64 = 235.0;
/// Total luminance variance below which the raster is treated as uniform.
const UNIFORM_VARIANCE: f64 = 4.0;

/// Boolean tissue mask at raster resolution.
#[derive(Debug, Clone)]
pub struct TissueMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl TissueMask {
    pub fn coverage(&self) -> f64 {
        self.data.iter().filter(|&&b| b).count() as f64 / self.data.len() as f64
    }

    pub fn intersection_over_union(&self, other: &[bool]) -> f64 {
        assert_eq!(self.data.len(), other.len());
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(other) {
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[inline]
fn luminance(r: u8, g: u8, b: u8) -> u8 {
    // BT.601 integer approximation
    ((77 * r as u32 + 150 * g as u32 + 29 * b as u32) >> 8) as u8
}

/// Histogram statistics over the bin window [lo, 255].
fn window_stats(hist: &[u64; 256], lo: usize) -> (u64, f64, f64) {
    let mut count = 0u64;
    let mut sum = 0.0;
    for v in lo..256 {
        count += hist[v];
        sum += v as f64 * hist[v] as f64;
    }
    if count == 0 {
        return (0, 0.0, 0.0);
    }
    let mean = sum / count as f64;
    let mut var = 0.0;
    for v in lo..256 {
        var += (v as f64 - mean).powi(2) * hist[v] as f64;
    }
    (count, mean, var / count as f64)
}

/// Otsu threshold within [lo, 255]. Returns None when no split exists.
fn otsu_window(hist: &[u64; 256], lo: usize) -> Option<usize> {
    let (total, _, _) = window_stats(hist, lo);
    if total == 0 {
        return None;
    }
    let sum_all: f64 = (lo..256).map(|v| v as f64 * hist[v] as f64).sum();
    let mut w0 = 0u64;
    let mut sum0 = 0.0;
    let mut best: Option<(usize, f64)> = None;
    for t in lo..256 {
        w0 += hist[t];
        if w0 == 0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0 {
            break;
        }
        sum0 += t as f64 * hist[t] as f64;
        let m0 = sum0 / w0 as f64;
        let m1 = (sum_all - sum0) / w1 as f64;
        let var = (w0 as f64) * (w1 as f64) * (m0 - m1) * (m0 - m1);
        if best.map_or(true, |(_, bv)| var > bv) {
            best = Some((t, var));
        }
    }
    best.map(|(t, _)| t)
}

/// Pick the luminance threshold separating tissue from white background.
///
/// Repeatedly applies Otsu and inspects the bright class: if its mean is
/// white-ish the split is tissue-vs-background and we are done; otherwise the
/// split fell inside foreground structure (e.g. nuclei vs stroma) and Otsu is
/// re-run on the bright class alone. Returns None when no white background is
/// present, i.e. the frame is entirely tissue.
fn background_threshold(hist: &[u64; 256]) -> Option<usize> {
    let mut lo = 0usize;
    loop {
        let (count, mean, var) = window_stats(hist, lo);
        if count == 0 {
            return None;
        }
        if var < UNIFORM_VARIANCE {
            // a single narrow mode remains
            return if mean >= WHITE_POINT { Some(lo.saturating_sub(1)) } else { None };
        }
        let t = otsu_window(hist, lo)?;
        let (bcount, bmean, _) = window_stats(hist, t + 1);
        if bcount == 0 {
            return None;
        }
        if bmean >= WHITE_POINT {
            return Some(t);
        }
        lo = t + 1;
    }
}

/// Classify each pixel as tissue or background.
pub fn detect_tissue(raster: &SlideRaster) -> TissueMask {
    let (w, h) = (raster.width, raster.height);
    let n = w * h;
    let mut lum = vec![0u8; n];
    let mut hist = [0u64; 256];
    for i in 0..n {
        let l = luminance(raster.pixels[i * 3], raster.pixels[i * 3 + 1], raster.pixels[i * 3 + 2]);
        lum[i] = l;
        hist[l as usize] += 1;
    }

    let data = match background_threshold(&hist) {
        None => vec![true; n],
        Some(t) if t == 0 => vec![false; n],
        Some(t) => lum.iter().map(|&l| l as usize <= t).collect(),
    };

    let opened = morphological_open(&data, w, h);
    TissueMask { width: w, height: h, data: opened }
}

/// 3x3 erosion followed by 3x3 dilation.
fn morphological_open(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let eroded = morph(mask, w, h, true);
    morph(&eroded, w, h, false)
}

fn morph(mask: &[bool], w: usize, h: usize, erode: bool) -> Vec<bool> {
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = erode;
            'win: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    // out-of-bounds neighbors treated as background
                    let v = if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        false
                    } else {
                        mask[ny as usize * w + nx as usize]
                    };
                    if erode && !v {
                        acc = false;
                        break 'win;
                    }
                    if !erode && v {
                        acc = true;
                        break 'win;
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}
