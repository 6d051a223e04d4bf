//! Global log-average tone mapping from HDR radiance to display range.
//!
//! The log-average luminance `exp(mean(log(eps + L)))` normalizes the scene,
//! `s = key * L / L_avg` sets the exposure and `s / (1 + s)` compresses it.

use crate::error::{Error, Result};
use crate::image_io::{HdrImage, SdrImage};

/// Rec. 709 luminance weights.
pub const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TonemapParams {
    /// Offset keeping `log` finite on black pixels.
    pub epsilon: f64,
    /// Exposure key (middle-gray target).
    pub key: f64,
}

impl Default for TonemapParams {
    fn default() -> Self {
        TonemapParams {
            epsilon: 1e-6,
            key: 0.18,
        }
    }
}

impl TonemapParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "tonemap.epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.key > 0.0 && self.key.is_finite()) {
            return Err(Error::Config(format!("tonemap.key must be > 0, got {}", self.key)));
        }
        Ok(())
    }
}

#[inline]
pub fn pixel_luminance(rgb: [f32; 3]) -> f64 {
    LUMA[0] * rgb[0] as f64 + LUMA[1] * rgb[1] as f64 + LUMA[2] * rgb[2] as f64
}

/// Per-pixel luminance, row-major.
pub fn luminance(image: &HdrImage) -> Vec<f64> {
    image.pixels().map(pixel_luminance).collect()
}

/// `exp((1/N) * sum(log(eps + L)))` with compensated summation in a fixed order.
pub fn log_average(lum: &[f64], params: &TonemapParams) -> Result<f64> {
    if lum.is_empty() {
        return Err(Error::InvalidImage("log-average of an empty field".into()));
    }
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &l in lum {
        let y = (params.epsilon + l).ln() - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    Ok((sum / lum.len() as f64).exp())
}

/// Exposure-scaled luminance `key * L / L_avg`.
pub fn scaled_luminance(lum: &[f64], params: &TonemapParams) -> Result<Vec<f64>> {
    let avg = log_average(lum, params)?;
    Ok(lum.iter().map(|&l| params.key * l / avg).collect())
}

/// Display luminance `s / (1 + s)` for every pixel.
pub fn compress_luminance(lum: &[f64], params: &TonemapParams) -> Result<Vec<f64>> {
    Ok(scaled_luminance(lum, params)?
        .into_iter()
        .map(|s| s / (1.0 + s))
        .collect())
}

/// Map one pixel to display luminance `ld`, keeping its chromaticity.
///
/// Channels scale by `ld / L`. A pixel whose scaled channels would pass the
/// ceiling `(1 + ld) / 2` is desaturated toward gray along the line through
/// `(ld, ld, ld)`, which keeps luminance at `ld` and every channel below 1.
#[inline]
pub fn recolor(rgb: [f32; 3], l: f64, ld: f64) -> [f64; 3] {
    if l <= 0.0 {
        return [0.0; 3];
    }
    let k = ld / l;
    let c = rgb.map(|v| v as f64 * k);
    let peak = c[0].max(c[1]).max(c[2]);
    let ceiling = 0.5 * (1.0 + ld);
    if peak <= ceiling {
        return c;
    }
    let t = (ceiling - ld) / (peak - ld);
    c.map(|v| ld + t * (v - ld))
}

pub fn tonemap(image: &HdrImage, params: &TonemapParams) -> Result<SdrImage> {
    params.validate()?;
    let lum = luminance(image);
    let ld = compress_luminance(&lum, params)?;
    let mut data = Vec::with_capacity(image.data().len());
    for ((rgb, &l), &d) in image.pixels().zip(&lum).zip(&ld) {
        // rounding into f32 must not reach 1.0 or dip below 0
        data.extend(recolor(rgb, l, d).map(|v| (v as f32).clamp(0.0, 1.0)));
    }
    SdrImage::new(image.width(), image.height(), data)
}
