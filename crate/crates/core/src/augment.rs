//! Stochastic two-view augmentation for contrastive pre-training.
//!
//! The stack applies, in order: discrete rotation, vertical flip, horizontal
//! flip, random resized crop, color jitter, random grayscale, gaussian blur.
//! Every random decision consumes f32 uniforms through a [`DrawSource`], and
//! each applied op logs its draws, so any view can be replayed bit-exactly
//! from its [`DrawLog`].

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::slide::TileImage;

/// Which discrete rotation angles are in play.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotateMode {
    /// Angles 90, 170, 280 (as tabulated).
    Table,
    /// Angles 90, 180, 270 (right angles only).
    RightAngles,
}

#[derive(Debug, Clone)]
pub struct AugmentationConfig {
    pub rotate_mode: RotateMode,
    /// Probability that any rotation fires; the angle is then uniform over
    /// the configured set. The default 0.75 gives each of the three angles
    /// probability 1/4 alongside a 1/4 no-op.
    pub p_rotate: f32,
    pub p_vflip: f32,
    pub p_hflip: f32,
    pub p_jitter: f32,
    pub p_grayscale: f32,
    pub p_blur: f32,
    pub crop_scale_range: (f32, f32),
    pub jitter_brightness: f32,
    pub jitter_contrast: f32,
    pub jitter_saturation: f32,
    pub jitter_hue: f32,
    pub blur_sigma_range: (f32, f32),
    pub output_size: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            rotate_mode: RotateMode::Table,
            p_rotate: 0.75,
            p_vflip: 0.5,
            p_hflip: 0.5,
            p_jitter: 0.8,
            p_grayscale: 0.2,
            p_blur: 0.5,
            crop_scale_range: (0.2, 1.0),
            jitter_brightness: 0.8,
            jitter_contrast: 0.8,
            jitter_saturation: 0.8,
            jitter_hue: 0.2,
            blur_sigma_range: (0.1, 2.0),
            output_size: 224,
        }
    }
}

impl AugmentationConfig {
    /// A configuration where every stochastic op is disabled and crops are
    /// forced to the identity; used by determinism tests.
    pub fn no_op() -> Self {
        AugmentationConfig {
            p_rotate: 0.0,
            p_vflip: 0.0,
            p_hflip: 0.0,
            p_jitter: 0.0,
            p_grayscale: 0.0,
            p_blur: 0.0,
            crop_scale_range: (1.0, 1.0),
            ..Default::default()
        }
    }

    pub fn rotate_angles(&self) -> &'static [f32] {
        match self.rotate_mode {
            RotateMode::Table => &[90.0, 170.0, 280.0],
            RotateMode::RightAngles => &[90.0, 180.0, 270.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (label, p) in [
            ("p_rotate", self.p_rotate),
            ("p_vflip", self.p_vflip),
            ("p_hflip", self.p_hflip),
            ("p_jitter", self.p_jitter),
            ("p_grayscale", self.p_grayscale),
            ("p_blur", self.p_blur),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{label} = {p} outside [0, 1]")));
            }
        }
        let (smin, smax) = self.crop_scale_range;
        if !(smin > 0.0 && smin <= smax && smax <= 1.0) {
            return Err(Error::Config(format!("crop scale range ({smin}, {smax}) invalid")));
        }
        let (bmin, bmax) = self.blur_sigma_range;
        if !(bmin > 0.0 && bmin <= bmax) {
            return Err(Error::Config(format!("blur sigma range ({bmin}, {bmax}) invalid")));
        }
        Ok(())
    }
}

/// A float tile: HWC interleaved RGB in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct TileF {
    pub size: usize,
    pub data: Vec<f32>,
}

impl TileF {
    pub fn from_u8(tile: &TileImage) -> Self {
        TileF {
            size: tile.size,
            data: tile.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        }
    }

    pub fn constant(size: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            data.extend_from_slice(&rgb);
        }
        TileF { size, data }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.size + x) * 3 + c]
    }

    #[inline]
    fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.size + x) * 3 + c] = v;
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// draw recording / replay
// ---------------------------------------------------------------------------

/// Augmentation op ids used in the replay log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AugOp {
    Rotate = 1,
    VFlip = 2,
    HFlip = 3,
    Crop = 4,
    Jitter = 5,
    Grayscale = 6,
    Blur = 7,
}

impl AugOp {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(AugOp::Rotate),
            2 => Some(AugOp::VFlip),
            3 => Some(AugOp::HFlip),
            4 => Some(AugOp::Crop),
            5 => Some(AugOp::Jitter),
            6 => Some(AugOp::Grayscale),
            7 => Some(AugOp::Blur),
            _ => None,
        }
    }
}

/// Recorded uniform draws, grouped per op.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DrawLog {
    pub records: Vec<(AugOp, Vec<f32>)>,
}

impl DrawLog {
    /// Binary record stream: per record, op id u8, count u32, f32 LE draws.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (op, draws) in &self.records {
            out.push(*op as u8);
            out.extend_from_slice(&(draws.len() as u32).to_le_bytes());
            for &d in draws {
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut records = Vec::new();
        let mut pos = 0usize;
        while pos < bytes.len() {
            if pos + 5 > bytes.len() {
                return Err(Error::Format { offset: Some(pos as u64), msg: "truncated draw log".into() });
            }
            let op = AugOp::from_u8(bytes[pos]).ok_or_else(|| Error::Format {
                offset: Some(pos as u64),
                msg: format!("unknown op id {}", bytes[pos]),
            })?;
            let n = u32::from_le_bytes(bytes[pos + 1..pos + 5].try_into().unwrap()) as usize;
            pos += 5;
            if pos + 4 * n > bytes.len() {
                return Err(Error::Format { offset: Some(pos as u64), msg: "truncated draws".into() });
            }
            let draws = bytes[pos..pos + 4 * n]
                .chunks(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += 4 * n;
            records.push((op, draws));
        }
        Ok(DrawLog { records })
    }
}

/// Source of uniform f32 draws in [0, 1).
trait DrawSource {
    fn draw(&mut self) -> f32;
    fn begin(&mut self, op: AugOp);
}

/// Records draws from a live generator.
struct Recorder<'a> {
    rng: &'a mut Rng,
    log: DrawLog,
}

impl DrawSource for Recorder<'_> {
    fn draw(&mut self) -> f32 {
        let v = self.rng.uniform_f32();
        self.log.records.last_mut().expect("begin before draw").1.push(v);
        v
    }

    fn begin(&mut self, op: AugOp) {
        self.log.records.push((op, Vec::new()));
    }
}

/// Replays a recorded log.
struct Replayer<'a> {
    log: &'a DrawLog,
    record: usize,
    offset: usize,
}

impl DrawSource for Replayer<'_> {
    fn draw(&mut self) -> f32 {
        let (_, draws) = &self.log.records[self.record - 1];
        let v = draws[self.offset];
        self.offset += 1;
        v
    }

    fn begin(&mut self, _op: AugOp) {
        self.record += 1;
        self.offset = 0;
    }
}

// ---------------------------------------------------------------------------
// geometric ops
// ---------------------------------------------------------------------------

/// Exact 90-degree clockwise rotation.
pub fn rotate90(tile: &TileF) -> TileF {
    let n = tile.size;
    let mut out = TileF { size: n, data: vec![0.0; n * n * 3] };
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                out.set(x, y, c, tile.at(y, n - 1 - x, c));
            }
        }
    }
    out
}

pub fn rotate180(tile: &TileF) -> TileF {
    let n = tile.size;
    let mut out = TileF { size: n, data: vec![0.0; n * n * 3] };
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                out.set(x, y, c, tile.at(n - 1 - x, n - 1 - y, c));
            }
        }
    }
    out
}

pub fn rotate270(tile: &TileF) -> TileF {
    let n = tile.size;
    let mut out = TileF { size: n, data: vec![0.0; n * n * 3] };
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                out.set(x, y, c, tile.at(n - 1 - y, x, c));
            }
        }
    }
    out
}

#[inline]
fn reflect(i: i64, n: i64) -> usize {
    // mirror including the edge sample: -1 -> 0, n -> n-1
    let mut v = i;
    if v < 0 {
        v = -v - 1;
    }
    if v >= n {
        v = 2 * n - 1 - v;
    }
    v.clamp(0, n - 1) as usize
}

#[inline]
fn sample_bilinear_reflect(tile: &TileF, x: f32, y: f32, c: usize) -> f32 {
    let n = tile.size as i64;
    let x0 = x.floor() as i64;
    let y0 = y.floor() as i64;
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    let (x0r, x1r) = (reflect(x0, n), reflect(x0 + 1, n));
    let (y0r, y1r) = (reflect(y0, n), reflect(y0 + 1, n));
    tile.at(x0r, y0r, c) * (1.0 - fx) * (1.0 - fy)
        + tile.at(x1r, y0r, c) * fx * (1.0 - fy)
        + tile.at(x0r, y1r, c) * (1.0 - fx) * fy
        + tile.at(x1r, y1r, c) * fx * fy
}

/// Bilinear rotation about the tile center with reflect padding.
pub fn rotate_bilinear(tile: &TileF, degrees: f32) -> TileF {
    let n = tile.size;
    let rad = degrees.to_radians();
    let (sin, cos) = (rad.sin(), rad.cos());
    let c = (n as f32 - 1.0) / 2.0;
    let mut out = TileF { size: n, data: vec![0.0; n * n * 3] };
    for y in 0..n {
        for x in 0..n {
            let dx = x as f32 - c;
            let dy = y as f32 - c;
            let sx = cos * dx + sin * dy + c;
            let sy = -sin * dx + cos * dy + c;
            for ch in 0..3 {
                out.set(x, y, ch, sample_bilinear_reflect(tile, sx, sy, ch).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Rotate by an angle drawn from the configured set.
pub fn rotate_discrete(tile: &TileF, angle: f32, cfg: &AugmentationConfig) -> Result<TileF> {
    if !cfg.rotate_angles().contains(&angle) {
        return Err(Error::Config(format!("rotation angle {angle} not in the configured set")));
    }
    Ok(match angle as i64 {
        90 => rotate90(tile),
        180 => rotate180(tile),
        270 => rotate270(tile),
        _ => rotate_bilinear(tile, angle),
    })
}

pub fn vflip(tile: &TileF) -> TileF {
    let n = tile.size;
    let mut out = TileF { size: n, data: vec![0.0; n * n * 3] };
    for y in 0..n {
        let src = (n - 1 - y) * n * 3;
        out.data[y * n * 3..(y + 1) * n * 3].copy_from_slice(&tile.data[src..src + n * 3]);
    }
    out
}

pub fn hflip(tile: &TileF) -> TileF {
    let n = tile.size;
    let mut out = TileF { size: n, data: vec![0.0; n * n * 3] };
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                out.set(x, y, c, tile.at(n - 1 - x, y, c));
            }
        }
    }
    out
}

/// Bilinear resize of a square sub-region to `out_size`.
fn resize_region(tile: &TileF, x0: usize, y0: usize, w: usize, h: usize, out_size: usize) -> TileF {
    let mut out = TileF { size: out_size, data: vec![0.0; out_size * out_size * 3] };
    let sx = w as f32 / out_size as f32;
    let sy = h as f32 / out_size as f32;
    for y in 0..out_size {
        let src_y = y0 as f32 + (y as f32 + 0.5) * sy - 0.5;
        for x in 0..out_size {
            let src_x = x0 as f32 + (x as f32 + 0.5) * sx - 0.5;
            for c in 0..3 {
                out.set(x, y, c, sample_bilinear_reflect(tile, src_x, src_y, c).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Random resized crop: area fraction in `crop_scale_range`, aspect ratio
/// log-uniform in [3/4, 4/3], resized to the configured output. Falls back to
/// a center crop after 10 infeasible draws.
fn random_resized_crop(tile: &TileF, cfg: &AugmentationConfig, src: &mut dyn DrawSource) -> TileF {
    src.begin(AugOp::Crop);
    let n = tile.size;
    let area = (n * n) as f32;
    let (smin, smax) = cfg.crop_scale_range;
    let (log_rmin, log_rmax) = ((3.0f32 / 4.0).ln(), (4.0f32 / 3.0).ln());
    for _ in 0..10 {
        let target = area * (smin + (smax - smin) * src.draw());
        let aspect = (log_rmin + (log_rmax - log_rmin) * src.draw()).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w == 0 || h == 0 || w > n || h > n {
            continue;
        }
        let x0 = ((n - w + 1) as f32 * src.draw()) as usize;
        let y0 = ((n - h + 1) as f32 * src.draw()) as usize;
        if w == n && h == n && cfg.output_size == n {
            return tile.clone();
        }
        return resize_region(tile, x0.min(n - w), y0.min(n - h), w, h, cfg.output_size);
    }
    if cfg.output_size == n {
        tile.clone()
    } else {
        resize_region(tile, 0, 0, n, n, cfg.output_size)
    }
}

// ---------------------------------------------------------------------------
// photometric ops
// ---------------------------------------------------------------------------

#[inline]
fn lum(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn adjust_brightness(tile: &mut TileF, f: f32) {
    for v in &mut tile.data {
        *v = (*v * f).clamp(0.0, 1.0);
    }
}

fn adjust_contrast(tile: &mut TileF, f: f32) {
    let mut mean = 0.0f64;
    for px in tile.data.chunks(3) {
        mean += lum(px[0], px[1], px[2]) as f64;
    }
    let mean = (mean / (tile.size * tile.size) as f64) as f32;
    for v in &mut tile.data {
        *v = (mean + f * (*v - mean)).clamp(0.0, 1.0);
    }
}

fn adjust_saturation(tile: &mut TileF, f: f32) {
    for px in tile.data.chunks_mut(3) {
        let gray = lum(px[0], px[1], px[2]);
        for v in px {
            *v = (gray + f * (*v - gray)).clamp(0.0, 1.0);
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn adjust_hue(tile: &mut TileF, shift: f32) {
    for px in tile.data.chunks_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        px[0] = r.clamp(0.0, 1.0);
        px[1] = g.clamp(0.0, 1.0);
        px[2] = b.clamp(0.0, 1.0);
    }
}

/// Color jitter with the factors supplied directly (brightness, contrast,
/// saturation multipliers and hue shift).
pub fn color_jitter_with(tile: &TileF, factors: [f32; 4]) -> TileF {
    let mut out = tile.clone();
    adjust_brightness(&mut out, factors[0]);
    adjust_contrast(&mut out, factors[1]);
    adjust_saturation(&mut out, factors[2]);
    adjust_hue(&mut out, factors[3]);
    out
}

pub fn grayscale(tile: &TileF) -> TileF {
    let mut out = tile.clone();
    for px in out.data.chunks_mut(3) {
        let gray = lum(px[0], px[1], px[2]).clamp(0.0, 1.0);
        px.fill(gray);
    }
    out
}

/// Separable gaussian blur, kernel radius ceil(3 sigma), reflect padding.
pub fn gaussian_blur(tile: &TileF, sigma: f32, cfg: &AugmentationConfig) -> Result<TileF> {
    let (smin, smax) = cfg.blur_sigma_range;
    if !(smin..=smax).contains(&sigma) {
        return Err(Error::Config(format!("blur sigma {sigma} outside [{smin}, {smax}]")));
    }
    Ok(gaussian_blur_unchecked(tile, sigma))
}

fn gaussian_blur_unchecked(tile: &TileF, sigma: f32) -> TileF {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let mut sum = 0.0f32;
    for i in -radius..=radius {
        let w = (-(i * i) as f32 * inv2s2).exp();
        kernel.push(w);
        sum += w;
    }
    for w in &mut kernel {
        *w /= sum;
    }

    let n = tile.size as i64;
    let mut horiz = TileF { size: tile.size, data: vec![0.0; tile.data.len()] };
    for y in 0..tile.size {
        for x in 0..n {
            let mut acc = [0.0f32; 3];
            for (ki, &w) in kernel.iter().enumerate() {
                let sx = reflect(x + ki as i64 - radius, n);
                for (a, c) in acc.iter_mut().zip(0..3) {
                    *a += w * tile.at(sx, y, c);
                }
            }
            for (c, &a) in acc.iter().enumerate() {
                horiz.set(x as usize, y, c, a);
            }
        }
    }
    let mut out = TileF { size: tile.size, data: vec![0.0; tile.data.len()] };
    for y in 0..n {
        for x in 0..tile.size {
            let mut acc = [0.0f32; 3];
            for (ki, &w) in kernel.iter().enumerate() {
                let sy = reflect(y + ki as i64 - radius, n);
                for (a, c) in acc.iter_mut().zip(0..3) {
                    *a += w * horiz.at(x, sy, c);
                }
            }
            for (c, &a) in acc.iter().enumerate() {
                out.set(x, y as usize, c, a.clamp(0.0, 1.0));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// the full stack
// ---------------------------------------------------------------------------

/// Both augmented views of one source tile, with replayable draw logs.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub query_view: TileF,
    pub key_view: TileF,
    pub tile_id: u64,
    pub query_log: DrawLog,
    pub key_log: DrawLog,
}

fn apply_stack(tile: &TileF, cfg: &AugmentationConfig, src: &mut dyn DrawSource) -> TileF {
    src.begin(AugOp::Rotate);
    let angles = cfg.rotate_angles();
    let mut out = if src.draw() < cfg.p_rotate {
        let pick = ((src.draw() * angles.len() as f32) as usize).min(angles.len() - 1);
        rotate_discrete(tile, angles[pick], cfg).expect("angle from configured set")
    } else {
        tile.clone()
    };

    src.begin(AugOp::VFlip);
    if src.draw() < cfg.p_vflip {
        out = vflip(&out);
    }
    src.begin(AugOp::HFlip);
    if src.draw() < cfg.p_hflip {
        out = hflip(&out);
    }

    out = random_resized_crop(&out, cfg, src);

    src.begin(AugOp::Jitter);
    if src.draw() < cfg.p_jitter {
        let f = |s: f32, u: f32| (1.0 - s).max(0.0) + ((1.0 + s) - (1.0 - s).max(0.0)) * u;
        let factors = [
            f(cfg.jitter_brightness, src.draw()),
            f(cfg.jitter_contrast, src.draw()),
            f(cfg.jitter_saturation, src.draw()),
            cfg.jitter_hue * (2.0 * src.draw() - 1.0),
        ];
        out = color_jitter_with(&out, factors);
    }

    src.begin(AugOp::Grayscale);
    if src.draw() < cfg.p_grayscale {
        out = grayscale(&out);
    }

    src.begin(AugOp::Blur);
    if src.draw() < cfg.p_blur {
        let (smin, smax) = cfg.blur_sigma_range;
        let sigma = smin + (smax - smin) * src.draw();
        out = gaussian_blur_unchecked(&out, sigma);
    }
    out
}

/// One pass through the stack, recording draws.
pub fn augment_once(tile: &TileF, cfg: &AugmentationConfig, rng: &mut Rng) -> (TileF, DrawLog) {
    let mut rec = Recorder { rng, log: DrawLog::default() };
    let out = apply_stack(tile, cfg, &mut rec);
    (out, rec.log)
}

/// Replay a recorded log against the same source tile.
pub fn replay(tile: &TileF, cfg: &AugmentationConfig, log: &DrawLog) -> TileF {
    let mut rep = Replayer { log, record: 0, offset: 0 };
    apply_stack(tile, cfg, &mut rep)
}

/// Two independent passes with streams derived from `(seed, tile_id)`.
pub fn two_views(tile: &TileF, cfg: &AugmentationConfig, seed: u64, tile_id: u64) -> ViewPair {
    let mut q_rng = Rng::stream_indexed(seed, "augment.query", tile_id);
    let mut k_rng = Rng::stream_indexed(seed, "augment.key", tile_id);
    let (query_view, query_log) = augment_once(tile, cfg, &mut q_rng);
    let (key_view, key_log) = augment_once(tile, cfg, &mut k_rng);
    ViewPair { query_view, key_view, tile_id, query_log, key_log }
}
