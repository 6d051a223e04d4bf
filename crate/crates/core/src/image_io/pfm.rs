//! Portable float map: `PF` (RGB) or `Pf` (gray), rows stored bottom-up, the
//! sign of the scale line selecting byte order (negative = little-endian).

use std::path::Path;

use super::HdrImage;
use crate::error::{Error, Result};

/// Raw float raster, rows top-down, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PfmImage {
    pub fn gray(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height);
        PfmImage {
            width,
            height,
            channels: 1,
            data,
        }
    }
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && *pos - start < 64 {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::MalformedPfmHeader("unexpected end of header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::MalformedPfmHeader("header is not text".into()))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<PfmImage> {
    let channels = match bytes.get(..2) {
        Some(b"PF") => 3,
        Some(b"Pf") => 1,
        other => {
            return Err(Error::BadMagic(
                String::from_utf8_lossy(other.unwrap_or(bytes)).into_owned(),
            ));
        }
    };
    if !bytes.get(2).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::BadMagic(
            String::from_utf8_lossy(&bytes[..bytes.len().min(3)]).into_owned(),
        ));
    }
    let mut pos = 2;
    let dim = |s: &str| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|&d| d >= 1)
            .ok_or_else(|| Error::MalformedPfmHeader(format!("bad dimension {s:?}")))
    };
    let width = dim(token(bytes, &mut pos)?)?;
    let height = dim(token(bytes, &mut pos)?)?;
    let scale_tok = token(bytes, &mut pos)?;
    let scale: f32 = scale_tok
        .parse()
        .ok()
        .filter(|s: &f32| s.is_finite() && *s != 0.0)
        .ok_or_else(|| Error::MalformedPfmHeader(format!("bad scale {scale_tok:?}")))?;
    // exactly one whitespace byte separates the header from the payload
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::MalformedPfmHeader("missing separator after scale".into()));
    }
    pos += 1;
    let payload = &bytes[pos..];
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels * 4))
        .ok_or_else(|| Error::MalformedPfmHeader("dimensions overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::PayloadMismatch {
            expected,
            found: payload.len(),
        });
    }
    let little = scale < 0.0;
    let row_len = width * channels;
    let mut data = vec![0.0f32; width * height * channels];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        // file rows run bottom-up
        let (file_row, col) = (i / row_len, i % row_len);
        data[(height - 1 - file_row) * row_len + col] = v;
    }
    Ok(PfmImage {
        width,
        height,
        channels,
        data,
    })
}

/// Little-endian encoding, scale `-1`.
pub fn encode_pfm(img: &PfmImage) -> Vec<u8> {
    let magic = if img.channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row_len = img.width * img.channels;
    out.reserve(img.data.len() * 4);
    for row in (0..img.height).rev() {
        for v in &img.data[row * row_len..(row + 1) * row_len] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_pfm_raw(path: impl AsRef<Path>) -> Result<PfmImage> {
    let path = path.as_ref();
    decode_pfm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_pfm_raw(path: impl AsRef<Path>, img: &PfmImage) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pfm(img)).map_err(|e| Error::io(path, e))
}

/// Read as radiance; gray maps are replicated to RGB.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<HdrImage> {
    let path = path.as_ref();
    let raw = read_pfm_raw(path)?;
    let data = if raw.channels == 3 {
        raw.data
    } else {
        raw.data.iter().flat_map(|&v| [v, v, v]).collect()
    };
    let mut img = HdrImage::new(raw.width, raw.height, data)?;
    img.source_path = Some(path.display().to_string());
    Ok(img)
}

pub fn write_pfm(path: impl AsRef<Path>, img: &HdrImage) -> Result<()> {
    write_pfm_raw(
        path,
        &PfmImage {
            width: img.width(),
            height: img.height(),
            channels: 3,
            data: img.data().to_vec(),
        },
    )
}
