//! Procedural slide synthesis with exact ground truth.
//!
//! Tissue and lesion regions come from thresholding smooth random fields at
//! the quantile matching the requested area fractions, so the generated mask
//! hits the target fractions up to ties. The two texture families share one
//! color palette and differ in local structure (nucleus-like dot size and
//! spacing, plus a fine ripple in lesions); mean color is matched so that
//! first-order color statistics alone do not separate them.

use rayon::prelude::*;

use super::{SlideRaster, LABEL_BACKGROUND, LABEL_LESION, LABEL_TISSUE};
use crate::error::{Error, Result};
use crate::rng::{derive_seed_indexed, Rng};

#[derive(Debug, Clone)]
pub struct SyntheticSlideSpec {
    pub width: usize,
    pub height: usize,
    pub microns_per_pixel: f64,
    pub tissue_fraction: f64,
    pub lesion_present: bool,
    pub lesion_fraction_of_tissue: f64,
    pub texture_seed: u64,
}

impl Default for SyntheticSlideSpec {
    fn default() -> Self {
        SyntheticSlideSpec {
            width: 2240,
            height: 2240,
            microns_per_pixel: 0.5,
            tissue_fraction: 0.6,
            lesion_present: false,
            lesion_fraction_of_tissue: 0.0,
            texture_seed: 0,
        }
    }
}

impl SyntheticSlideSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 448 || self.height < 448 {
            return Err(Error::Config(format!(
                "slide dimensions {}x{} below the 448 px minimum",
                self.width, self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.tissue_fraction)
            || !(0.0..=1.0).contains(&self.lesion_fraction_of_tissue)
        {
            return Err(Error::Config("fractions must lie in [0, 1]".into()));
        }
        if self.lesion_present != (self.lesion_fraction_of_tissue > 0.0) {
            return Err(Error::Config(
                "lesion_fraction_of_tissue must be positive exactly when lesion_present".into(),
            ));
        }
        Ok(())
    }
}

/// Smooth scalar field: random Gaussian bumps evaluated on a coarse lattice,
/// sampled with bilinear interpolation.
struct CoarseField {
    gw: usize,
    cell: f32,
    values: Vec<f32>,
}

impl CoarseField {
    fn gaussian_bumps(w: usize, h: usize, cell: usize, bumps: usize, sharp: f64, rng: &mut Rng) -> Self {
        let gw = w / cell + 2;
        let gh = h / cell + 2;
        let mut centers = Vec::with_capacity(bumps);
        for _ in 0..bumps {
            let cx = rng.range_f64(0.0, w as f64);
            let cy = rng.range_f64(0.0, h as f64);
            let sigma = rng.range_f64(0.12, 0.30) * (w.min(h) as f64) / sharp;
            let amp = rng.range_f64(0.6, 1.0);
            centers.push((cx, cy, 1.0 / (2.0 * sigma * sigma), amp));
        }
        let values: Vec<f32> = (0..gw * gh)
            .map(|i| {
                let gx = (i % gw) as f64 * cell as f64;
                let gy = (i / gw) as f64 * cell as f64;
                let mut acc = 0.0;
                for &(cx, cy, inv2s2, amp) in &centers {
                    let d2 = (gx - cx) * (gx - cx) + (gy - cy) * (gy - cy);
                    acc += amp * (-d2 * inv2s2).exp();
                }
                acc as f32
            })
            .collect();
        CoarseField { gw, cell: cell as f32, values }
    }

    /// Multi-octave value noise on the lattice.
    fn value_noise(w: usize, h: usize, cell: usize, rng: &mut Rng) -> Self {
        let gw = w / cell + 2;
        let gh = h / cell + 2;
        let coarse: Vec<f32> = (0..(gw / 4 + 2) * (gh / 4 + 2)).map(|_| rng.uniform_f32()).collect();
        let cw = gw / 4 + 2;
        let fine: Vec<f32> = (0..gw * gh).map(|_| rng.uniform_f32()).collect();
        let values: Vec<f32> = (0..gw * gh)
            .map(|i| {
                let (x, y) = ((i % gw) as f32 / 4.0, (i / gw) as f32 / 4.0);
                let (x0, y0) = (x as usize, y as usize);
                let (fx, fy) = (x - x0 as f32, y - y0 as f32);
                let at = |xx: usize, yy: usize| coarse[yy.min(gh / 4 + 1) * cw + xx.min(cw - 1)];
                let c = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                    + at(x0 + 1, y0) * fx * (1.0 - fy)
                    + at(x0, y0 + 1) * (1.0 - fx) * fy
                    + at(x0 + 1, y0 + 1) * fx * fy;
                0.7 * c + 0.3 * fine[i]
            })
            .collect();
        CoarseField { gw, cell: cell as f32, values }
    }

    #[inline]
    fn sample(&self, x: usize, y: usize) -> f32 {
        let fx = x as f32 / self.cell;
        let fy = y as f32 / self.cell;
        let (x0, y0) = (fx as usize, fy as usize);
        let (dx, dy) = (fx - x0 as f32, fy - y0 as f32);
        let i = y0 * self.gw + x0;
        let v00 = self.values[i];
        let v01 = self.values[i + 1];
        let v10 = self.values[i + self.gw];
        let v11 = self.values[i + self.gw + 1];
        v00 * (1.0 - dx) * (1.0 - dy) + v01 * dx * (1.0 - dy) + v10 * (1.0 - dx) * dy + v11 * dx * dy
    }
}

/// Cheap per-pixel hash noise in [-1, 1).
#[inline]
fn grain(x: usize, y: usize, salt: u64) -> f32 {
    let mut z = (x as u64).wrapping_mul(0x9E3779B97F4A7C15)
        ^ (y as u64).wrapping_mul(0xC2B2AE3D27D4EB4F)
        ^ salt;
    z ^= z >> 29;
    z = z.wrapping_mul(0xBF58476D1CE4E5B9);
    z ^= z >> 32;
    ((z >> 40) as f32) * (2.0 / (1u64 << 24) as f32) - 1.0
}

/// Threshold `field` at the value that keeps `fraction` of `eligible` pixels
/// at or above it. Returns the mask of selected pixels.
fn threshold_by_fraction(field: &[f32], eligible: Option<&[bool]>, fraction: f64) -> Vec<bool> {
    let mut selected = vec![false; field.len()];
    if fraction <= 0.0 {
        return selected;
    }
    let mut pool: Vec<f32> = match eligible {
        None => field.to_vec(),
        Some(e) => field.iter().zip(e).filter(|(_, &ok)| ok).map(|(&v, _)| v).collect(),
    };
    if pool.is_empty() {
        return selected;
    }
    let keep = ((pool.len() as f64) * fraction).round() as usize;
    if keep == 0 {
        return selected;
    }
    if keep >= pool.len() {
        match eligible {
            None => selected.fill(true),
            Some(e) => selected.copy_from_slice(e),
        }
        return selected;
    }
    let cut_idx = pool.len() - keep;
    let (_, cut, _) = pool.select_nth_unstable_by(cut_idx, |a, b| a.partial_cmp(b).unwrap());
    let cut = *cut;
    let mut remaining = keep;
    for (i, &v) in field.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if eligible.map_or(true, |e| e[i]) && v >= cut {
            selected[i] = true;
            remaining -= 1;
        }
    }
    selected
}

// Both families share the dot size distribution and area coverage. Lesions
// differ structurally (dots come in short chains instead of isolated
// placements) and carry a slightly darker nucleus shade. Everything else
// (palette, dot scale, density, blotch scale) varies per slide, so tiles
// form a continuum of appearances rather than two flat templates.
const DOT_RADIUS: [f64; 3] = [3.0, 4.0, 5.0];
const MEAN_R2: f64 = (9.0 + 16.0 + 25.0) / 3.0;
// ~7% of region area covered by dots in both families
const BASE_DOT_DENSITY: f64 = 0.07 / (std::f64::consts::PI * MEAN_R2);
/// Lesion dots come in chains of this many dots.
const LESION_CHAIN: usize = 5;
/// Extra lesion dot density relative to normal tissue.
const LESION_DENSITY_BOOST: f64 = 1.2;

/// Slide-level appearance factors drawn once per slide.
struct SlideStyle {
    base_a: [f32; 3],
    base_b: [f32; 3],
    dot_color: [f32; 3],
    lesion_dot_delta: f32,
    dot_scale: f64,
    density_mul: f64,
    chain_spacing: f64,
    blotch_cell: usize,
    bg_tint: f32,
}

impl SlideStyle {
    fn draw(rng: &mut Rng) -> SlideStyle {
        let hue = rng.range_f64(-4.0, 4.0) as f32;
        let warm = rng.range_f64(-3.0, 3.0) as f32;
        SlideStyle {
            base_a: [236.0 + warm, 198.0 - hue, 214.0 + hue],
            base_b: [214.0 + warm, 178.0 - hue, 222.0 + hue],
            dot_color: [
                96.0 + rng.range_f64(-6.0, 6.0) as f32,
                64.0 + rng.range_f64(-5.0, 5.0) as f32,
                134.0 + rng.range_f64(-6.0, 6.0) as f32,
            ],
            lesion_dot_delta: -14.0,
            dot_scale: rng.range_f64(0.9, 1.12),
            density_mul: rng.range_f64(0.9, 1.15),
            chain_spacing: rng.range_f64(2.2, 2.6),
            blotch_cell: 12 + rng.below(12),
            bg_tint: rng.range_f64(-2.0, 2.0) as f32,
        }
    }
}

/// Generate a histology-style slide with ground truth.
pub fn generate_synthetic_slide(spec: &SyntheticSlideSpec, seed: u64) -> Result<SlideRaster> {
    spec.validate()?;
    let base = derive_seed_indexed(seed, "slide.synth", spec.texture_seed);
    let (w, h) = (spec.width, spec.height);

    // region fields
    let mut field_rng = Rng::stream(base, "field");
    let tissue_field = CoarseField::gaussian_bumps(w, h, 8, 7, 1.0, &mut field_rng);
    let lesion_field = CoarseField::gaussian_bumps(w, h, 8, 4, 2.2, &mut field_rng);

    let tissue_values: Vec<f32> = sample_rows(&tissue_field, w, h);
    let tissue = threshold_by_fraction(&tissue_values, None, spec.tissue_fraction);
    drop(tissue_values);

    let mut mask = vec![LABEL_BACKGROUND; w * h];
    for (m, &t) in mask.iter_mut().zip(&tissue) {
        if t {
            *m = LABEL_TISSUE;
        }
    }
    if spec.lesion_present {
        let lesion_values: Vec<f32> = sample_rows(&lesion_field, w, h);
        let lesion = threshold_by_fraction(&lesion_values, Some(&tissue), spec.lesion_fraction_of_tissue);
        for (m, &l) in mask.iter_mut().zip(&lesion) {
            if l {
                *m = LABEL_LESION;
            }
        }
    }
    drop(tissue);

    // base coloring
    let mut texture_rng = Rng::stream(base, "texture");
    let style = SlideStyle::draw(&mut texture_rng);
    let blend_field = CoarseField::value_noise(w, h, style.blotch_cell, &mut texture_rng);
    let grain_salt = base ^ 0x5151;

    let mut pixels = vec![0u8; w * h * 3];
    pixels.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let label = mask[y * w + x];
            let px = &mut row[x * 3..x * 3 + 3];
            match label {
                LABEL_BACKGROUND => {
                    let g = grain(x, y, grain_salt);
                    px[0] = (250.0 + style.bg_tint + 3.0 * g).clamp(0.0, 255.0) as u8;
                    px[1] = (249.0 + style.bg_tint + 3.0 * g).clamp(0.0, 255.0) as u8;
                    px[2] = (247.0 + style.bg_tint + 3.0 * g).clamp(0.0, 255.0) as u8;
                }
                _ => {
                    let t = blend_field.sample(x, y).clamp(0.0, 1.0);
                    for c in 0..3 {
                        let bcol = style.base_a[c] * (1.0 - t) + style.base_b[c] * t;
                        let v = bcol + 5.0 * grain(x, y, grain_salt ^ (c as u64 + 1));
                        px[c] = v.clamp(0.0, 255.0) as u8;
                    }
                }
            }
        }
    });

    // nucleus-like dots: isolated in normal tissue, short chains in lesions,
    // with matched size distribution and area coverage
    let mut dot_rng = Rng::stream(base, "dots");
    let density = BASE_DOT_DENSITY * style.density_mul / (style.dot_scale * style.dot_scale);
    let attempts_normal = (density * (w * h) as f64).round() as usize;
    for _ in 0..attempts_normal {
        let x = dot_rng.below(w);
        let y = dot_rng.below(h);
        let r = (DOT_RADIUS[dot_rng.below(DOT_RADIUS.len())] * style.dot_scale).round() as i64;
        let shade = dot_rng.range_f64(-14.0, 14.0) as f32;
        if mask[y * w + x] == LABEL_TISSUE {
            draw_dot(&mut pixels, w, h, x as i64, y as i64, r.max(1), shade, &style.dot_color);
        }
    }
    let attempts_lesion =
        (density * LESION_DENSITY_BOOST / LESION_CHAIN as f64 * (w * h) as f64).round() as usize;
    for _ in 0..attempts_lesion {
        let x = dot_rng.below(w) as f64;
        let y = dot_rng.below(h) as f64;
        let r = (DOT_RADIUS[dot_rng.below(DOT_RADIUS.len())] * style.dot_scale).round() as i64;
        let shade = dot_rng.range_f64(-14.0, 14.0) as f32 + style.lesion_dot_delta;
        let dir = dot_rng.range_f64(0.0, std::f64::consts::TAU);
        let spacing = style.chain_spacing * r.max(1) as f64;
        if mask[y as usize * w + x as usize] == LABEL_LESION {
            for link in 0..LESION_CHAIN {
                let cx = x + dir.cos() * spacing * link as f64;
                let cy = y + dir.sin() * spacing * link as f64;
                if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
                    continue;
                }
                draw_dot(&mut pixels, w, h, cx as i64, cy as i64, r.max(1), shade, &style.dot_color);
            }
        }
    }

    SlideRaster::new(w, h, spec.microns_per_pixel, pixels, Some(mask))
}

fn sample_rows(field: &CoarseField, w: usize, h: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, v) in row.iter_mut().enumerate() {
            *v = field.sample(x, y);
        }
    });
    out
}

fn draw_dot(pixels: &mut [u8], w: usize, h: usize, cx: i64, cy: i64, r: i64, shade: f32, dot: &[f32; 3]) {
    let col = [
        (dot[0] + shade).clamp(0.0, 255.0) as u8,
        (dot[1] + shade).clamp(0.0, 255.0) as u8,
        (dot[2] + shade).clamp(0.0, 255.0) as u8,
    ];
    for dy in -r..=r {
        let y = cy + dy;
        if y < 0 || y >= h as i64 {
            continue;
        }
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let x = cx + dx;
            if x < 0 || x >= w as i64 {
                continue;
            }
            let i = (y as usize * w + x as usize) * 3;
            pixels[i] = col[0];
            pixels[i + 1] = col[1];
            pixels[i + 2] = col[2];
        }
    }
}

/// Generate an out-of-domain texture slide: stripe and checker regions on a
/// white background. Used to pre-train the non-histology baseline encoder.
pub fn generate_abstract_slide(spec: &SyntheticSlideSpec, seed: u64) -> Result<SlideRaster> {
    spec.validate()?;
    let base = derive_seed_indexed(seed, "slide.abstract", spec.texture_seed);
    let (w, h) = (spec.width, spec.height);

    let mut field_rng = Rng::stream(base, "field");
    let region_field = CoarseField::gaussian_bumps(w, h, 8, 7, 1.0, &mut field_rng);
    let family_field = CoarseField::gaussian_bumps(w, h, 8, 5, 1.4, &mut field_rng);
    let region_values = sample_rows(&region_field, w, h);
    let region = threshold_by_fraction(&region_values, None, spec.tissue_fraction);
    drop(region_values);

    let mut mask = vec![LABEL_BACKGROUND; w * h];
    for (m, &t) in mask.iter_mut().zip(&region) {
        if t {
            *m = LABEL_TISSUE;
        }
    }

    let mut texture_rng = Rng::stream(base, "texture");
    let stripe_dir = texture_rng.range_f64(0.0, std::f64::consts::PI);
    let stripe_freq = std::f64::consts::TAU / texture_rng.range_f64(48.0, 120.0);
    let (su, sv) = (stripe_dir.cos() * stripe_freq, stripe_dir.sin() * stripe_freq);
    let checker = 28 + texture_rng.below(36);
    let grain_salt = base ^ 0xABCD;

    let mut pixels = vec![0u8; w * h * 3];
    pixels.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let px = &mut row[x * 3..x * 3 + 3];
            if mask[y * w + x] == LABEL_BACKGROUND {
                let g = grain(x, y, grain_salt);
                let v = (250.0 + 3.0 * g).clamp(0.0, 255.0) as u8;
                px.copy_from_slice(&[v, v, v]);
            } else if family_field.sample(x, y) > 0.8 {
                // stripes, blue-gray
                let s = ((x as f64 * su + y as f64 * sv).sin() as f32) * 0.5 + 0.5;
                px[0] = (90.0 + 100.0 * s).clamp(0.0, 255.0) as u8;
                px[1] = (110.0 + 100.0 * s).clamp(0.0, 255.0) as u8;
                px[2] = (140.0 + 90.0 * s).clamp(0.0, 255.0) as u8;
            } else {
                // checkerboard, warm gray
                let on = ((x / checker) + (y / checker)) % 2 == 0;
                let v = if on { 120.0 } else { 190.0 } + 6.0 * grain(x, y, grain_salt ^ 7);
                px[0] = (v + 14.0).clamp(0.0, 255.0) as u8;
                px[1] = v.clamp(0.0, 255.0) as u8;
                px[2] = (v - 10.0).clamp(0.0, 255.0) as u8;
            }
        }
    });

    SlideRaster::new(w, h, spec.microns_per_pixel, pixels, Some(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide::{LABEL_LESION, LABEL_TISSUE};

    fn small_spec() -> SyntheticSlideSpec {
        SyntheticSlideSpec {
            width: 448,
            height: 448,
            tissue_fraction: 0.5,
            lesion_present: true,
            lesion_fraction_of_tissue: 0.1,
            ..Default::default()
        }
    }

    #[test]
    fn too_small_rejected() {
        let spec = SyntheticSlideSpec { width: 200, height: 448, ..Default::default() };
        assert!(generate_synthetic_slide(&spec, 1).is_err());
    }

    #[test]
    fn zero_tissue_means_all_background() {
        let spec = SyntheticSlideSpec {
            tissue_fraction: 0.0,
            width: 448,
            height: 448,
            ..Default::default()
        };
        let slide = generate_synthetic_slide(&spec, 1).unwrap();
        let mask = slide.label_mask.unwrap();
        assert!(mask.iter().all(|&m| m == LABEL_BACKGROUND));
    }

    #[test]
    fn no_lesion_flag_means_no_lesion_pixels() {
        let spec = SyntheticSlideSpec {
            width: 448,
            height: 448,
            tissue_fraction: 0.5,
            lesion_present: false,
            lesion_fraction_of_tissue: 0.0,
            ..Default::default()
        };
        let slide = generate_synthetic_slide(&spec, 2).unwrap();
        let mask = slide.label_mask.unwrap();
        assert!(mask.iter().all(|&m| m != LABEL_LESION));
        let tissue = mask.iter().filter(|&&m| m == LABEL_TISSUE).count();
        let frac = tissue as f64 / mask.len() as f64;
        assert!((frac - 0.5).abs() < 0.01, "tissue fraction {frac}");
    }

    #[test]
    fn lesion_share_of_tissue_matches_spec() {
        let slide = generate_synthetic_slide(&small_spec(), 3).unwrap();
        let mask = slide.label_mask.unwrap();
        let tissue = mask.iter().filter(|&&m| m != LABEL_BACKGROUND).count();
        let lesion = mask.iter().filter(|&&m| m == LABEL_LESION).count();
        let share = lesion as f64 / tissue as f64;
        assert!((share - 0.1).abs() <= 0.03, "lesion share {share}");
    }

    #[test]
    fn deterministic_given_spec_and_seed() {
        let a = generate_synthetic_slide(&small_spec(), 7).unwrap();
        let b = generate_synthetic_slide(&small_spec(), 7).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.label_mask, b.label_mask);
        let c = generate_synthetic_slide(&small_spec(), 8).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn lesion_fraction_consistency_enforced() {
        let spec = SyntheticSlideSpec {
            width: 448,
            height: 448,
            lesion_present: true,
            lesion_fraction_of_tissue: 0.0,
            ..Default::default()
        };
        assert!(generate_synthetic_slide(&spec, 1).is_err());
    }

    #[test]
    fn abstract_slide_has_regions() {
        let spec = SyntheticSlideSpec {
            width: 448,
            height: 448,
            tissue_fraction: 0.5,
            ..Default::default()
        };
        let slide = generate_abstract_slide(&spec, 5).unwrap();
        let mask = slide.label_mask.unwrap();
        let frac =
            mask.iter().filter(|&&m| m == LABEL_TISSUE).count() as f64 / mask.len() as f64;
        assert!((frac - 0.5).abs() < 0.01);
    }
}
