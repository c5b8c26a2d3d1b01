//! Per-slide frozen feature matrices and their on-disk format.
//!
//! Layout: magic `HFSX`, version u16, slide id (u32 length + UTF-8), N u32,
//! D u32, 32-byte encoder fingerprint, coordinate table (row, col, x, y as
//! u32 each per tile), payload row-major f32 little-endian, CRC32 of the
//! payload bytes.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::augment::TileF;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::slide::{read_tile, SlideRaster, TileGrid};
use crate::tensor::{ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"HFSX";
const VERSION: u16 = 1;

/// Tile coordinates aligned with feature rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileCoord {
    pub row: u32,
    pub col: u32,
    pub x: u32,
    pub y: u32,
}

/// N x D frozen features for one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub slide_id: String,
    pub dim: usize,
    pub coords: Vec<TileCoord>,
    /// Row-major N x D.
    pub data: Vec<f32>,
    /// Fingerprint of the encoder weights that produced the features.
    pub fingerprint: [u8; 32],
}

impl FeatureMatrix {
    pub fn tile_count(&self) -> usize {
        self.coords.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.coords.len() * self.dim {
            return Err(Error::shape(format!(
                "feature payload {} != {} tiles x {}",
                self.data.len(),
                self.coords.len(),
                self.dim
            )));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite feature in slide {}", self.slide_id)));
        }
        if self.fingerprint == [0u8; 32] {
            return Err(Error::Data("empty encoder fingerprint".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.slide_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.slide_id.as_bytes());
        out.extend_from_slice(&(self.coords.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        for c in &self.coords {
            for v in [c.row, c.col, c.x, c.y] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let payload_start = out.len();
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[payload_start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let need = |pos: usize, n: usize| -> Result<()> {
            if pos + n > bytes.len() {
                Err(Error::Format {
                    offset: Some(pos as u64),
                    msg: format!("truncated: wanted {n} bytes, {} remain", bytes.len() - pos),
                })
            } else {
                Ok(())
            }
        };
        need(pos, 6)?;
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format { offset: Some(0), msg: "bad magic, expected HFSX".into() });
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format { offset: Some(4), msg: format!("unsupported version {version}") });
        }
        pos = 6;
        need(pos, 4)?;
        let id_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        need(pos, id_len)?;
        let slide_id = std::str::from_utf8(&bytes[pos..pos + id_len])
            .map_err(|_| Error::Format { offset: Some(pos as u64), msg: "slide id not UTF-8".into() })?
            .to_string();
        pos += id_len;
        need(pos, 8 + 32)?;
        let n = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        let mut fingerprint = [0u8; 32];
        fingerprint.copy_from_slice(&bytes[pos..pos + 32]);
        pos += 32;
        need(pos, n * 16)?;
        let mut coords = Vec::with_capacity(n);
        for _ in 0..n {
            let u = |o: usize| u32::from_le_bytes(bytes[pos + o..pos + o + 4].try_into().unwrap());
            coords.push(TileCoord { row: u(0), col: u(4), x: u(8), y: u(12) });
            pos += 16;
        }
        need(pos, n * dim * 4 + 4)?;
        let payload = &bytes[pos..pos + n * dim * 4];
        let stored_crc =
            u32::from_le_bytes(bytes[pos + n * dim * 4..pos + n * dim * 4 + 4].try_into().unwrap());
        let actual = crc32fast::hash(payload);
        if actual != stored_crc {
            return Err(Error::Format {
                offset: Some(pos as u64),
                msg: format!("payload CRC mismatch: stored {stored_crc:08x}, computed {actual:08x}"),
            });
        }
        if pos + n * dim * 4 + 4 != bytes.len() {
            return Err(Error::Format {
                offset: Some((pos + n * dim * 4 + 4) as u64),
                msg: "trailing bytes".into(),
            });
        }
        let data = payload.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(FeatureMatrix { slide_id, dim, coords, data, fingerprint })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One corpus entry: where a slide's features live and its label.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CorpusEntry {
    pub slide_id: String,
    pub label: u32,
    pub path: String,
    pub tile_count: usize,
}

/// Index over per-slide feature files sharing one encoder fingerprint.
#[derive(Debug, Clone, Default)]
pub struct CorpusIndex {
    pub entries: Vec<CorpusEntry>,
    pub fingerprint: [u8; 32],
}

impl CorpusIndex {
    /// Append an entry, enforcing slide-id uniqueness and fingerprint
    /// equality across the corpus.
    pub fn push(&mut self, entry: CorpusEntry, fingerprint: [u8; 32]) -> Result<()> {
        if self.entries.is_empty() {
            self.fingerprint = fingerprint;
        } else if self.fingerprint != fingerprint {
            return Err(Error::Data(format!(
                "encoder fingerprint mismatch for slide {}: corpus was extracted with different weights",
                entry.slide_id
            )));
        }
        if self.entries.iter().any(|e| e.slide_id == entry.slide_id) {
            return Err(Error::Data(format!("duplicate slide id {}", entry.slide_id)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "{{\"fingerprint\":\"{}\"}}", hex(&self.fingerprint))?;
        for e in &self.entries {
            let line = serde_json::to_string(e)
                .map_err(|e| Error::Data(format!("corpus index encode: {e}")))?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Data("empty corpus index".into()))?;
        let header: serde_json::Value = serde_json::from_str(header)
            .map_err(|e| Error::Data(format!("corpus index header: {e}")))?;
        let fp_hex = header["fingerprint"]
            .as_str()
            .ok_or_else(|| Error::Data("corpus index header missing fingerprint".into()))?;
        let fingerprint = unhex(fp_hex)?;
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let e: CorpusEntry = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("corpus index line {}: {e}", i + 2)))?;
            entries.push(e);
        }
        Ok(CorpusIndex { entries, fingerprint })
    }

    /// Load every feature matrix, validating fingerprints.
    pub fn load_features(&self, base_dir: &Path) -> Result<Vec<FeatureMatrix>> {
        self.entries
            .iter()
            .map(|e| {
                let fm = FeatureMatrix::load(&base_dir.join(&e.path))?;
                if fm.fingerprint != self.fingerprint {
                    return Err(Error::Data(format!(
                        "slide {}: feature fingerprint differs from corpus index",
                        e.slide_id
                    )));
                }
                Ok(fm)
            })
            .collect()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 {
        return Err(Error::Data(format!("fingerprint hex length {}", s.len())));
    }
    let mut out = [0u8; 32];
    for i in 0..32 {
        out[i] = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
            .map_err(|e| Error::Data(format!("fingerprint hex: {e}")))?;
    }
    Ok(out)
}

/// Extract eval-mode features for every retained tile of one slide.
pub fn extract_slide_features(
    slide_id: &str,
    raster: &SlideRaster,
    grid: &TileGrid,
    encoder: &Encoder,
    params: &ParamSet<f32>,
    fingerprint: [u8; 32],
    batch_size: usize,
) -> Result<FeatureMatrix> {
    let dim = encoder.cfg.feature_dim;
    let coords: Vec<TileCoord> = grid
        .tiles
        .iter()
        .map(|t| TileCoord { row: t.row as u32, col: t.col as u32, x: t.x as u32, y: t.y as u32 })
        .collect();

    // decode tiles up front, then encode in parallel batches; each batch is
    // an independent graph so results do not depend on the split
    let tiles: Vec<TileF> = grid
        .tiles
        .iter()
        .map(|t| read_tile(raster, t, grid.tile_size).map(|img| TileF::from_u8(&img)))
        .collect::<Result<_>>()?;

    let batches: Vec<&[TileF]> = tiles.chunks(batch_size.max(1)).collect();
    let encoded: Vec<Result<Tensor<f32>>> =
        batches.par_iter().map(|chunk| encoder.encode(params, chunk)).collect();

    let mut data = Vec::with_capacity(tiles.len() * dim);
    for enc_batch in encoded {
        data.extend_from_slice(enc_batch?.data());
    }
    let fm = FeatureMatrix { slide_id: slide_id.to_string(), dim, coords, data, fingerprint };
    if !fm.is_degenerate() {
        fm.validate()?;
    }
    Ok(fm)
}

/// Extract features for a whole corpus of (slide, grid) pairs into `out_dir`,
/// returning the corpus index.
#[allow(clippy::type_complexity)]
pub fn extract_features(
    slides: &[(String, SlideRaster, TileGrid, u32)],
    encoder: &Encoder,
    params: &ParamSet<f32>,
    batch_size: usize,
    out_dir: &Path,
) -> Result<CorpusIndex> {
    std::fs::create_dir_all(out_dir)?;
    let fingerprint = params.fingerprint();
    let mut index = CorpusIndex::default();
    for (slide_id, raster, grid, label) in slides {
        let fm = extract_slide_features(slide_id, raster, grid, encoder, params, fingerprint, batch_size)?;
        let rel = format!("{slide_id}.hfsx");
        fm.save(&out_dir.join(&rel))?;
        index.push(
            CorpusEntry {
                slide_id: slide_id.clone(),
                label: *label,
                path: rel,
                tile_count: fm.tile_count(),
            },
            fingerprint,
        )?;
    }
    Ok(index)
}
