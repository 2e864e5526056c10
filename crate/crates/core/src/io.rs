//! File formats.
//!
//! * SDIP: 16-byte header (`b"SDIP"`, u32 height, u32 width, u32 reserved,
//!   all little-endian) followed by `height·width` little-endian f64 values
//!   and an optional UTF-8 footer running to the end of the file.
//! * PGM: binary (`P5`) grayscale, written with 16-bit samples.
//! * COO: sparse basis triplets, each `u32 row, u32 col, f64 value`
//!   little-endian, sorted by `(row, col)`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::network::{ParamLayout, ParamVector};
use crate::operators::Image;

const MAGIC: &[u8; 4] = b"SDIP";
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct SdipFile {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub footer: String,
}

pub fn encode_sdip(height: usize, width: usize, data: &[f64], footer: &str) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * data.len() + footer.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(footer.as_bytes());
    buf
}

pub fn decode_sdip(bytes: &[u8], path: &Path) -> Result<SdipFile> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing SDIP header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (height, width) = (word(4), word(8));
    let n = height
        .checked_mul(width)
        .ok_or_else(|| Error::format(path, "dimension overflow"))?;
    let end = HEADER_LEN + 8 * n;
    if bytes.len() < end {
        return Err(Error::format(
            path,
            format!("payload truncated: need {} bytes, have {}", end, bytes.len()),
        ));
    }
    let data = bytes[HEADER_LEN..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let footer = String::from_utf8(bytes[end..].to_vec())
        .map_err(|_| Error::format(path, "footer is not UTF-8"))?;
    Ok(SdipFile {
        height,
        width,
        data,
        footer,
    })
}

pub fn write_sdip(path: &Path, height: usize, width: usize, data: &[f64], footer: &str) -> Result<()> {
    fs::write(path, encode_sdip(height, width, data, footer)).map_err(|e| Error::io(path, e))
}

pub fn read_sdip(path: &Path) -> Result<SdipFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sdip(&bytes, path)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    write_sdip(path, image.height, image.width, &image.data, "")
}

pub fn read_image(path: &Path) -> Result<Image> {
    let f = read_sdip(path)?;
    Image::new(f.height, f.width, f.data)
}

/// Parameter checkpoint: a `d_θ x 1` SDIP payload with the layout manifest
/// as footer.
pub fn write_checkpoint(path: &Path, params: &ParamVector) -> Result<()> {
    write_sdip(path, params.len(), 1, &params.data, &params.layout.to_manifest())
}

pub fn read_checkpoint(path: &Path) -> Result<ParamVector> {
    let f = read_sdip(path)?;
    if f.width != 1 {
        return Err(Error::format(path, "checkpoint payload must be a single column"));
    }
    let layout = ParamLayout::from_manifest(&f.footer)?;
    ParamVector::new(f.data, Arc::new(layout))
}

/// Writes a 16-bit binary PGM; intensities are clamped to `[0, 1]`.
pub fn write_pgm16(path: &Path, image: &Image) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n65535\n", image.width, image.height).into_bytes();
    for &v in &image.data {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads an 8- or 16-bit binary PGM, scaling samples to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::format(path, "only binary (P5) PGM is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, "bad PGM header field"));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, "PGM maxval out of range"));
    }
    let n = width * height;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let raster = bytes
        .get(pos..pos + n * bytes_per)
        .ok_or_else(|| Error::format(path, "PGM raster truncated"))?;
    let data = if bytes_per == 2 {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64)
            .collect()
    } else {
        raster.iter().map(|&b| b as f64 / maxval as f64).collect()
    };
    Image::new(height, width, data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triplet {
    pub row: u32,
    pub col: u32,
    pub value: f64,
}

pub fn write_coo(path: &Path, triplets: &[Triplet]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in triplets {
        w.write_all(&t.row.to_le_bytes())
            .and_then(|_| w.write_all(&t.col.to_le_bytes()))
            .and_then(|_| w.write_all(&t.value.to_le_bytes()))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_coo(path: &Path) -> Result<Vec<Triplet>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(Error::format(path, "COO file length is not a multiple of 16"));
    }
    let triplets: Vec<Triplet> = bytes
        .chunks_exact(16)
        .map(|c| Triplet {
            row: u32::from_le_bytes(c[0..4].try_into().expect("4 bytes")),
            col: u32::from_le_bytes(c[4..8].try_into().expect("4 bytes")),
            value: f64::from_le_bytes(c[8..16].try_into().expect("8 bytes")),
        })
        .collect();
    if triplets
        .windows(2)
        .any(|w| (w[0].row, w[0].col) >= (w[1].row, w[1].col))
    {
        return Err(Error::format(path, "COO triplets are not sorted by (row, col)"));
    }
    Ok(triplets)
}
