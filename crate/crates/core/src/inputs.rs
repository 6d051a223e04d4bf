//! Conversions from images to network input tensors.

use crate::error::Result;
use crate::image_io::{HdrImage, SdrImage};
use crate::nn::Tensor;
use crate::tonemap::{tonemap, TonemapParams};

/// Largest finite half-float; the default ceiling of the log input encoding.
pub const DEFAULT_INPUT_MAX: f64 = 65504.0;

/// Interleaved RGB rows to a `[1, 3, h, w]` tensor.
pub fn rgb_tensor(width: usize, height: usize, data: &[f32], f: impl Fn(f32) -> f32) -> Tensor<f32> {
    let plane = width * height;
    let mut out = vec![0.0f32; 3 * plane];
    for (p, px) in data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + p] = f(px[c]);
        }
    }
    Tensor::from_vec([1, 3, height, width], out)
}

pub fn gray_tensor(width: usize, height: usize, data: &[f32]) -> Tensor<f32> {
    Tensor::from_vec([1, 1, height, width], data.to_vec())
}

/// HDR generator input: `ln(1 + c) / ln(1 + input_max)` per channel.
pub fn hdr_input(image: &HdrImage, input_max: f64) -> Tensor<f32> {
    let k = 1.0 / (1.0 + input_max).ln();
    rgb_tensor(image.width(), image.height(), image.data(), |v| {
        ((v as f64).ln_1p() * k) as f32
    })
}

/// SDR generator input: the tone-mapped image quantized to 8 bits.
pub fn sdr_input(image: &HdrImage, params: &TonemapParams) -> Result<Tensor<f32>> {
    let sdr = tonemap(image, params)?.quantized_8bit();
    Ok(sdr_tensor(&sdr))
}

pub fn sdr_tensor(image: &SdrImage) -> Tensor<f32> {
    rgb_tensor(image.width(), image.height(), image.data(), |v| v)
}

/// `ln(1 + c)` per channel divided by the largest such value in the image.
pub fn log_normalized(image: &HdrImage) -> Tensor<f32> {
    let max = image.data().iter().fold(0.0f64, |m, &v| m.max((v as f64).ln_1p()));
    let k = if max > 0.0 { 1.0 / max } else { 0.0 };
    rgb_tensor(image.width(), image.height(), image.data(), |v| {
        ((v as f64).ln_1p() * k) as f32
    })
}
