//! PNG readers and writers for rasters, label masks, and heatmaps.
//!
//! Rasters are 8-bit RGB. Ground-truth masks are 8-bit palette images whose
//! indices are the labels (0 background, 1 tissue, 2 lesion); readers return
//! the raw indices, not palette colors.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Display palette for label masks (index = label).
const MASK_PALETTE: [u8; 9] = [
    245, 245, 245, // 0 background
    225, 150, 180, // 1 tissue
    60, 0, 90, // 2 lesion
];

pub fn write_rgb(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height * 3 {
        return Err(Error::shape(format!(
            "rgb buffer length {} does not match {width}x{height}x3",
            pixels.len()
        )));
    }
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_compression(png::Compression::Fast);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(pixels).map_err(png_err)?;
    Ok(())
}

pub fn read_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!(
            "{}: expected 8-bit RGB, got {:?}/{:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

/// Write a label mask as an 8-bit palette PNG (indices are labels).
pub fn write_mask(path: &Path, width: usize, height: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != width * height {
        return Err(Error::shape(format!(
            "mask length {} does not match {width}x{height}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 2) {
        return Err(Error::Data(format!("mask label {bad} out of range 0..=2")));
    }
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(MASK_PALETTE.to_vec());
    enc.set_compression(png::Compression::Fast);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(labels).map_err(png_err)?;
    Ok(())
}

/// Read a palette mask back as raw label indices.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    // keep palette indices instead of expanding to RGB
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!(
            "{}: expected 8-bit palette mask, got {:?}/{:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

pub fn write_gray(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape(format!(
            "gray buffer length {} does not match {width}x{height}",
            pixels.len()
        )));
    }
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_compression(png::Compression::Fast);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(pixels).map_err(png_err)?;
    Ok(())
}

fn png_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Data(format!("png: {e}"))
}
