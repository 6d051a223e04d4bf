use std::io::Cursor;
use std::path::Path;

use super::{IrImage, SdrImage};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(BitDepth::Eight),
            16 => Ok(BitDepth::Sixteen),
            other => Err(Error::Config(format!("unsupported PNG bit depth {other}"))),
        }
    }

    fn max_code(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }

    /// `round(v * (2^depth - 1))`.
    pub fn quantize(self, v: f32) -> u16 {
        (v as f64 * self.max_code()).round() as u16
    }
}

/// Images that can be written as PNG.
pub trait PngSource {
    fn dims(&self) -> (usize, usize);
    fn channels(&self) -> usize;
    fn samples(&self) -> &[f32];
}

impl PngSource for SdrImage {
    fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }
    fn channels(&self) -> usize {
        3
    }
    fn samples(&self) -> &[f32] {
        self.data()
    }
}

impl PngSource for IrImage {
    fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }
    fn channels(&self) -> usize {
        1
    }
    fn samples(&self) -> &[f32] {
        self.data()
    }
}

pub fn encode_png(img: &impl PngSource, depth: BitDepth) -> Result<Vec<u8>> {
    let (w, h) = img.dims();
    let samples = img.samples();
    if let Some(index) = samples.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::OutOfRange {
            index,
            value: samples[index],
        });
    }
    let mut raw = Vec::with_capacity(samples.len() * 2);
    for &v in samples {
        let q = depth.quantize(v);
        match depth {
            BitDepth::Eight => raw.push(q as u8),
            BitDepth::Sixteen => raw.extend_from_slice(&q.to_be_bytes()),
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = ::png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(if img.channels() == 1 {
            ::png::ColorType::Grayscale
        } else {
            ::png::ColorType::Rgb
        });
        enc.set_depth(match depth {
            BitDepth::Eight => ::png::BitDepth::Eight,
            BitDepth::Sixteen => ::png::BitDepth::Sixteen,
        });
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer.write_image_data(&raw).map_err(|e| Error::Png(e.to_string()))?;
        writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(path: impl AsRef<Path>, img: &impl PngSource, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(img, depth)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Decoded PNG samples normalized to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct PngData {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub bit_depth: u8,
    pub data: Vec<f32>,
}

pub fn read_png(path: impl AsRef<Path>) -> Result<PngData> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut dec = ::png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(::png::Transformations::EXPAND);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let channels = info.color_type.samples();
    let (bit_depth, data): (u8, Vec<f32>) = match info.bit_depth {
        ::png::BitDepth::Sixteen => (
            16,
            buf[..info.buffer_size()]
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
                .collect(),
        ),
        _ => (8, buf[..info.buffer_size()].iter().map(|&b| b as f32 / 255.0).collect()),
    };
    Ok(PngData {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        bit_depth,
        data,
    })
}

/// Read a grayscale PNG as an infrared image.
pub fn read_png_ir(path: impl AsRef<Path>) -> Result<IrImage> {
    let path = path.as_ref();
    let png = read_png(path)?;
    if png.channels != 1 {
        return Err(Error::InvalidImage(format!(
            "{}: expected grayscale, found {} channels",
            path.display(),
            png.channels
        )));
    }
    IrImage::new(png.width, png.height, png.data)
}
