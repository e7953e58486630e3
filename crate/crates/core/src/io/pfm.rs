//! Portable float maps.
//!
//! Header: `Pf` (one channel) or `PF` (three channels), then `width height`,
//! then a scale whose sign selects byte order (negative = little-endian).
//! Pixel rows follow bottom-to-top as 32-bit floats. This module always
//! writes little-endian and reads either order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, NormalGrid};

/// Decoded float map with rows top-to-bottom and channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Pfm {
    pub fn from_grid(grid: &Grid<f64>) -> Self {
        Self {
            width: grid.width(),
            height: grid.height(),
            channels: 1,
            data: grid.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_normals(normals: &NormalGrid) -> Self {
        Self {
            width: normals.width(),
            height: normals.height(),
            channels: 3,
            data: normals
                .as_slice()
                .iter()
                .flat_map(|n| n.iter().map(|&c| c as f32))
                .collect(),
        }
    }

    pub fn to_grid(&self) -> Result<Grid<f64>> {
        if self.channels != 1 {
            return Err(Error::shape(format!(
                "expected 1 channel, found {}",
                self.channels
            )));
        }
        Grid::from_vec(
            self.width,
            self.height,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn to_normals(&self) -> Result<NormalGrid> {
        if self.channels != 3 {
            return Err(Error::shape(format!(
                "expected 3 channels, found {}",
                self.channels
            )));
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect();
        Grid::from_vec(self.width, self.height, data)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let magic = match self.channels {
            1 => "Pf",
            3 => "PF",
            c => {
                return Err(Error::shape(format!(
                    "PFM supports 1 or 3 channels, not {c}"
                )))
            }
        };
        if self.data.len() != self.width * self.height * self.channels {
            return Err(Error::shape("PFM data length does not match dimensions"));
        }
        write!(out, "{magic}\n{} {}\n-1.0\n", self.width, self.height)?;
        let row_len = self.width * self.channels;
        for row in self.data.chunks_exact(row_len.max(1)).rev() {
            for v in row {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut cursor = 0;
        let mut token = || -> Result<String> {
            while cursor < bytes.len() && bytes[cursor].is_ascii_whitespace() {
                cursor += 1;
            }
            let start = cursor;
            while cursor < bytes.len() && !bytes[cursor].is_ascii_whitespace() {
                cursor += 1;
            }
            if start == cursor {
                return Err(Error::corrupt("PFM header ended early"));
            }
            let tok = String::from_utf8_lossy(&bytes[start..cursor]).into_owned();
            // Exactly one whitespace byte separates the header from the payload.
            cursor += 1;
            Ok(tok)
        };
        let channels = match token()?.as_str() {
            "Pf" => 1,
            "PF" => 3,
            other => return Err(Error::corrupt(format!("bad PFM magic '{other}'"))),
        };
        let parse_dim = |s: String| {
            s.parse::<usize>()
                .map_err(|_| Error::corrupt(format!("bad PFM dimension '{s}'")))
        };
        let width = parse_dim(token()?)?;
        let height = parse_dim(token()?)?;
        let scale_tok = token()?;
        let scale: f32 = scale_tok
            .parse()
            .map_err(|_| Error::corrupt(format!("bad PFM scale '{scale_tok}'")))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::corrupt("PFM scale must be finite and nonzero"));
        }
        let little_endian = scale < 0.0;
        let payload = &bytes[cursor.min(bytes.len())..];
        let count = width * height * channels;
        if payload.len() != count * 4 {
            return Err(Error::corrupt(format!(
                "PFM payload has {} bytes, expected {}",
                payload.len(),
                count * 4
            )));
        }
        let mut data = vec![0f32; count];
        let row_len = width * channels;
        for (src_row, dst_row) in payload
            .chunks_exact((row_len * 4).max(1))
            .zip(data.chunks_exact_mut(row_len.max(1)).rev())
        {
            for (chunk, dst) in src_row.chunks_exact(4).zip(dst_row.iter_mut()) {
                let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
                *dst = if little_endian {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
            }
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_row_order() {
        let grid = Grid::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        Pfm::from_grid(&grid).write(&mut buf).unwrap();
        assert!(buf.starts_with(b"Pf\n2 2\n-1.0\n"));
        let payload = &buf[12..];
        // Bottom row first.
        assert_eq!(&payload[..4], &3f32.to_le_bytes());
        let back = Pfm::read(&buf[..]).unwrap().to_grid().unwrap();
        assert_eq!(back, grid);
    }

    #[test]
    fn reads_big_endian() {
        let mut buf = b"Pf\n1 2\n1.0\n".to_vec();
        buf.extend_from_slice(&5f32.to_be_bytes());
        buf.extend_from_slice(&7f32.to_be_bytes());
        let pfm = Pfm::read(&buf[..]).unwrap();
        assert_eq!(pfm.data, vec![7.0, 5.0]);
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let grid = Grid::filled(3, 3, 0.5);
        let mut buf = Vec::new();
        Pfm::from_grid(&grid).write(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(Pfm::read(&buf[..]), Err(Error::Corrupt(_))));
        assert!(matches!(
            Pfm::read(&b"P6\n1 1\n"[..]),
            Err(Error::Corrupt(_))
        ));
    }

    #[test]
    fn three_channel_round_trip() {
        let normals = Grid::from_vec(2, 1, vec![[0.0, 0.0, 1.0], [0.6, 0.0, 0.8]]).unwrap();
        let mut buf = Vec::new();
        Pfm::from_normals(&normals).write(&mut buf).unwrap();
        assert!(buf.starts_with(b"PF\n"));
        let back = Pfm::read(&buf[..]).unwrap().to_normals().unwrap();
        assert_eq!(back.get(1, 0)[0], 0.6f32 as f64);
    }
}
