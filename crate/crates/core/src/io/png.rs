//! Grayscale PNG: 8-bit for shading images and masks, 16-bit for depth with a
//! JSON sidecar holding the integer-to-meters scale.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::corrupt(format!("png: {e}"))
}

fn write_gray(
    path: &Path,
    width: usize,
    height: usize,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

fn read_gray(path: &Path, want: png::BitDepth) -> Result<(usize, usize, Vec<u8>)> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::corrupt("png: image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != want {
        return Err(Error::corrupt(format!(
            "png: expected {want:?} grayscale, found {:?} {:?}",
            info.bit_depth, info.color_type
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

/// Values in `[0, 1]` quantized to `round(v * 255)`.
pub fn write_gray8(path: impl AsRef<Path>, image: &Grid<f64>) -> Result<()> {
    let bytes: Vec<u8> = image
        .as_slice()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_gray(
        path.as_ref(),
        image.width(),
        image.height(),
        png::BitDepth::Eight,
        &bytes,
    )
}

pub fn read_gray8(path: impl AsRef<Path>) -> Result<Grid<f64>> {
    let (w, h, bytes) = read_gray(path.as_ref(), png::BitDepth::Eight)?;
    Grid::from_vec(w, h, bytes.into_iter().map(|b| b as f64 / 255.0).collect())
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask
        .as_slice()
        .iter()
        .map(|&m| if m { 255 } else { 0 })
        .collect();
    write_gray(
        path.as_ref(),
        mask.width(),
        mask.height(),
        png::BitDepth::Eight,
        &bytes,
    )
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let (w, h, bytes) = read_gray(path.as_ref(), png::BitDepth::Eight)?;
    Grid::from_vec(w, h, bytes.into_iter().map(|b| b >= 128).collect())
}

/// Sidecar for 16-bit depth PNGs: `depth_m = value / scale`, value 0 = invalid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Depth16Sidecar {
    pub scale: f64,
    pub unit: DepthUnit,
    pub invalid_value: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthUnit {
    M,
}

pub fn sidecar_path(png_path: &Path) -> PathBuf {
    png_path.with_extension("json")
}

/// Writes `path` and `path.json`. Pixels that are masked out, non-finite, or
/// would overflow 16 bits are stored as 0.
pub fn write_depth16(
    path: impl AsRef<Path>,
    depth: &Grid<f64>,
    mask: &Mask,
    scale: f64,
) -> Result<()> {
    let path = path.as_ref();
    depth.check_shape(mask, "depth vs mask")?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::domain(format!(
            "depth scale {scale} must be positive"
        )));
    }
    let mut bytes = Vec::with_capacity(depth.len() * 2);
    for (&d, &ok) in depth.as_slice().iter().zip(mask.as_slice()) {
        let raw = d * scale;
        let value = if ok && raw.is_finite() && (0.5..65535.5).contains(&raw) {
            raw.round() as u16
        } else {
            0
        };
        bytes.extend_from_slice(&value.to_be_bytes());
    }
    write_gray(
        path,
        depth.width(),
        depth.height(),
        png::BitDepth::Sixteen,
        &bytes,
    )?;
    let sidecar = Depth16Sidecar {
        scale,
        unit: DepthUnit::M,
        invalid_value: 0,
    };
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_depth16(path: impl AsRef<Path>) -> Result<(Grid<f64>, Mask)> {
    let path = path.as_ref();
    let sidecar: Depth16Sidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    if !(sidecar.scale > 0.0) {
        return Err(Error::corrupt("depth sidecar scale must be positive"));
    }
    let (w, h, bytes) = read_gray(path, png::BitDepth::Sixteen)?;
    let raw: Vec<u16> = bytes
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    let mask = Grid::from_vec(
        w,
        h,
        raw.iter().map(|&v| v != sidecar.invalid_value).collect(),
    )?;
    let depth = Grid::from_vec(
        w,
        h,
        raw.iter()
            .map(|&v| {
                if v == sidecar.invalid_value {
                    f64::NAN
                } else {
                    v as f64 / sidecar.scale
                }
            })
            .collect(),
    )?;
    Ok((depth, mask))
}
