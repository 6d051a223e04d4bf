//! Image containers and the file formats the pipeline reads and writes:
//! Radiance RGBE for HDR input, PFM for lossless float interchange, and
//! 8/16-bit PNG for display-referred and infrared output.

mod pfm;
mod png;
mod radiance;

pub use self::pfm::{decode_pfm, encode_pfm, read_pfm, read_pfm_raw, write_pfm, write_pfm_raw, PfmImage};
pub use self::png::{encode_png, read_png, read_png_ir, write_png, BitDepth, PngData, PngSource};
pub use self::radiance::{
    decode_radiance, encode_radiance, read_radiance_hdr, rgb_to_rgbe, rgbe_to_rgb, write_radiance_hdr,
};

use crate::error::{Error, Result};

/// Linear-radiance RGB image, interleaved, row-major from the top.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
    pub source_path: Option<String>,
}

impl HdrImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::InvalidImage(format!(
                "expected {} RGB values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidImage(format!(
                "radiance {} at index {i} is not finite and non-negative",
                data[i]
            )));
        }
        Ok(HdrImage {
            width,
            height,
            data,
            source_path: None,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Multiply every channel by `k >= 0`.
    pub fn scaled(&self, k: f32) -> Result<Self> {
        Self::new(self.width, self.height, self.data.iter().map(|v| v * k).collect())
    }
}

fn check_unit(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(Error::OutOfRange {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

/// Display-referred RGB image with every channel in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SdrImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl SdrImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::InvalidImage(format!("bad SDR buffer for {width}x{height}")));
        }
        check_unit(&data)?;
        Ok(SdrImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Round-trip through 8-bit code values.
    pub fn quantized_8bit(&self) -> SdrImage {
        SdrImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| (v * 255.0).round() / 255.0).collect(),
        }
    }
}

/// Single-channel infrared image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IrImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl IrImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::InvalidImage(format!("bad IR buffer for {width}x{height}")));
        }
        check_unit(&data)?;
        Ok(IrImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Gamma used to display exposure brackets.
pub const DISPLAY_GAMMA: f32 = 2.2;

/// Exposure brackets: each offset `e` scales radiance by `2^e`, clamps to
/// `[0, 1]` and gamma-encodes. Output order follows `ev_offsets`.
pub fn render_bracket(image: &HdrImage, ev_offsets: &[f32]) -> Vec<SdrImage> {
    ev_offsets
        .iter()
        .map(|&ev| {
            let gain = ev.exp2();
            let data = image
                .data
                .iter()
                .map(|&v| (v * gain).clamp(0.0, 1.0).powf(1.0 / DISPLAY_GAMMA))
                .collect();
            SdrImage {
                width: image.width,
                height: image.height,
                data,
            }
        })
        .collect()
}
