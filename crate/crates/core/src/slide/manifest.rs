//! Corpus manifests (JSON lines) and tile-grid CSVs.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grid::{TileGrid, TileRef};
use crate::error::{Error, Result};

/// One slide of a corpus.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SlideRecord {
    pub slide_id: String,
    pub raster_path: String,
    pub mask_path: Option<String>,
    /// Class id; 0/1 for binary tasks.
    pub label: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_hint: Option<String>,
}

/// A corpus: one record per slide, stored as JSON lines.
#[derive(Debug, Clone, Default)]
pub struct CorpusManifest {
    pub slides: Vec<SlideRecord>,
}

impl CorpusManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for rec in &self.slides {
            let line = serde_json::to_string(rec)
                .map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut slides = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SlideRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1)))?;
            slides.push(rec);
        }
        Ok(CorpusManifest { slides })
    }
}

const TILE_CSV_HEADER: &str = "slide_id,row,col,x,y,tissue_frac,lesion_frac";

/// Append one slide's retained tiles to a CSV writer.
pub fn write_tile_csv(out: &mut impl Write, slide_id: &str, grid: &TileGrid) -> Result<()> {
    for t in &grid.tiles {
        writeln!(
            out,
            "{slide_id},{},{},{},{},{:.6},{:.6}",
            t.row, t.col, t.x, t.y, t.tissue_frac, t.lesion_frac
        )?;
    }
    Ok(())
}

pub fn write_tile_csv_header(out: &mut impl Write) -> Result<()> {
    writeln!(out, "{TILE_CSV_HEADER}")?;
    Ok(())
}

/// Parse a tile CSV back into per-slide tile lists, preserving order.
pub fn read_tile_csv(path: &Path) -> Result<Vec<(String, TileRef)>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != TILE_CSV_HEADER {
                return Err(Error::Data(format!("unexpected tile CSV header: {line}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Data(format!("tile CSV line {}: {} fields", i + 1, fields.len())));
        }
        let parse_err = |e: &dyn std::fmt::Display| Error::Data(format!("tile CSV line {}: {e}", i + 1));
        out.push((
            fields[0].to_string(),
            TileRef {
                row: fields[1].parse().map_err(|e: std::num::ParseIntError| parse_err(&e))?,
                col: fields[2].parse().map_err(|e: std::num::ParseIntError| parse_err(&e))?,
                x: fields[3].parse().map_err(|e: std::num::ParseIntError| parse_err(&e))?,
                y: fields[4].parse().map_err(|e: std::num::ParseIntError| parse_err(&e))?,
                tissue_frac: fields[5].parse().map_err(|e: std::num::ParseFloatError| parse_err(&e))?,
                lesion_frac: fields[6].parse().map_err(|e: std::num::ParseFloatError| parse_err(&e))?,
            },
        ));
    }
    Ok(out)
}
