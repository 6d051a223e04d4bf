//! Multi-scale caption-context features for the generator.
//!
//! The stand-in backbone is a frozen strided conv pyramid with seeded random
//! weights. Features from a real dense-captioning model can be produced
//! offline and loaded from `<dir>/<id>.L<i>.pfm`, one file per level, each a
//! gray PFM of width `W_i` and height `C_i * H_i` (channel planes stacked).

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image_io::{read_pfm_raw, write_pfm_raw, HdrImage, PfmImage};
use crate::inputs::{log_normalized, sdr_tensor};
use crate::nn::{Conv2d, Graph, ParamStore, Tensor};
use crate::tonemap::{tonemap, TonemapParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaptionSource {
    Standin,
    Precomputed,
}

impl CaptionSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standin" => Ok(CaptionSource::Standin),
            "precomputed" => Ok(CaptionSource::Precomputed),
            _ => Err(Error::Config(format!(
                "caption.kind must be standin or precomputed, got {s:?}"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CaptionSource::Standin => "standin",
            CaptionSource::Precomputed => "precomputed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionBackendConfig {
    pub kind: CaptionSource,
    pub standin_seed: u64,
    pub standin_channels: Vec<usize>,
    /// Tone-map HDR input before feature extraction.
    pub preprocess: bool,
    pub features_dir: Option<PathBuf>,
}

impl CaptionBackendConfig {
    pub fn standin(channels: Vec<usize>, seed: u64) -> Self {
        CaptionBackendConfig {
            kind: CaptionSource::Standin,
            standin_seed: seed,
            standin_channels: channels,
            preprocess: true,
            features_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.standin_channels.is_empty() || self.standin_channels.contains(&0) {
            return Err(Error::Config("caption channel counts must be positive".into()));
        }
        if self.kind == CaptionSource::Precomputed && self.features_dir.is_none() {
            return Err(Error::Config(
                "precomputed caption features need caption.features_dir".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionPyramid {
    /// Level `i` (0-based here) is `[1, C_{i+1}, H / 2^(i+1), W / 2^(i+1)]`.
    pub levels: Vec<Tensor<f32>>,
    pub source: CaptionSource,
}

impl CaptionPyramid {
    pub fn zeros_like(&self) -> Self {
        CaptionPyramid {
            levels: self.levels.iter().map(|l| Tensor::zeros(l.shape())).collect(),
            source: self.source,
        }
    }

    /// Checks the pyramid against an `h x w` image and expected channel widths.
    pub fn check(&self, id: &str, h: usize, w: usize, channels: &[usize]) -> Result<()> {
        if self.levels.len() != channels.len() {
            return Err(Error::FeatureMismatch {
                id: id.into(),
                reason: format!("{} levels, expected {}", self.levels.len(), channels.len()),
            });
        }
        for (i, (l, &c)) in self.levels.iter().zip(channels).enumerate() {
            let [_, lc, lh, lw] = l.shape();
            let (eh, ew) = (h >> (i + 1), w >> (i + 1));
            if (lh, lw) != (eh, ew) {
                return Err(Error::FeatureMismatch {
                    id: id.into(),
                    reason: format!("level {} is {lh}x{lw}, expected {eh}x{ew}", i + 1),
                });
            }
            if lc != c {
                return Err(Error::FeatureMismatch {
                    id: id.into(),
                    reason: format!("level {} has {lc} channels, expected {c}", i + 1),
                });
            }
        }
        Ok(())
    }
}

/// Frozen random conv pyramid: each level is `relu(conv3x3 stride 2)`.
#[derive(Clone, Debug)]
pub struct StandinBackbone {
    convs: Vec<Conv2d>,
    params: ParamStore<f32>,
}

impl StandinBackbone {
    pub fn new(channels: &[usize], seed: u64) -> Self {
        let mut params = ParamStore::new("caption");
        let mut cin = 3;
        let convs: Vec<Conv2d> = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(format!("cap{}", i + 1), cin, c, 3, 2, 1);
                conv.init(&mut params, seed);
                cin = c;
                conv
            })
            .collect();
        StandinBackbone { convs, params }
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// `x` is `[n, 3, h, w]`.
    pub fn forward(&self, x: &Tensor<f32>) -> Vec<Tensor<f32>> {
        let mut g = Graph::new(false);
        let bind = self.params.bind(false);
        let mut cur = g.constant(x.clone());
        let mut levels = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let y = conv.forward(&mut g, &bind, cur);
            cur = g.relu(y);
            levels.push(g.value(cur).clone());
        }
        levels
    }
}

/// Caption-branch input for an HDR image.
pub fn caption_input(image: &HdrImage, preprocess: bool, params: &TonemapParams) -> Result<Tensor<f32>> {
    if preprocess {
        Ok(sdr_tensor(&tonemap(image, params)?))
    } else {
        Ok(log_normalized(image))
    }
}

/// A configured caption backend.
#[derive(Clone, Debug)]
pub struct CaptionExtractor {
    pub config: CaptionBackendConfig,
    backbone: StandinBackbone,
}

impl CaptionExtractor {
    pub fn new(config: CaptionBackendConfig) -> Result<Self> {
        config.validate()?;
        let backbone = StandinBackbone::new(&config.standin_channels, config.standin_seed);
        Ok(CaptionExtractor { config, backbone })
    }

    pub fn backbone(&self) -> &StandinBackbone {
        &self.backbone
    }

    /// Stand-in pyramid for an already-prepared `[1, 3, h, w]` input.
    pub fn from_tensor(&self, x: &Tensor<f32>) -> CaptionPyramid {
        CaptionPyramid {
            levels: self.backbone.forward(x),
            source: CaptionSource::Standin,
        }
    }

    /// Pyramid for `image`; `id` names the feature files of a precomputed backend.
    pub fn extract(&self, image: &HdrImage, id: &str, params: &TonemapParams) -> Result<CaptionPyramid> {
        let (h, w) = (image.height(), image.width());
        let levels = self.config.standin_channels.len();
        if h % (1 << levels) != 0 || w % (1 << levels) != 0 {
            return Err(Error::ShapeMismatch(format!(
                "image {h}x{w} is not divisible by {}",
                1 << levels
            )));
        }
        match self.config.kind {
            CaptionSource::Standin => Ok(self.from_tensor(&caption_input(image, self.config.preprocess, params)?)),
            CaptionSource::Precomputed => {
                let dir = self.config.features_dir.as_ref().expect("validated");
                load_features(dir, id, h, w, &self.config.standin_channels)
            }
        }
    }
}

fn level_path(dir: &Path, id: &str, level: usize) -> PathBuf {
    dir.join(format!("{id}.L{level}.pfm"))
}

pub fn dump_features(pyramid: &CaptionPyramid, dir: impl AsRef<Path>, id: &str) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, level) in pyramid.levels.iter().enumerate() {
        let [n, c, h, w] = level.shape();
        if n != 1 {
            return Err(Error::ShapeMismatch(format!("feature level {} has batch {n}", i + 1)));
        }
        write_pfm_raw(
            level_path(dir, id, i + 1),
            &PfmImage::gray(w, c * h, level.data().to_vec()),
        )?;
    }
    Ok(())
}

/// Loads the pyramid for an `height x width` image. Stacked planes carry no
/// channel count of their own, so the expected widths are passed in and every
/// file is checked against them.
pub fn load_features(
    dir: impl AsRef<Path>,
    id: &str,
    height: usize,
    width: usize,
    channels: &[usize],
) -> Result<CaptionPyramid> {
    let dir = dir.as_ref();
    let mut out = Vec::with_capacity(channels.len());
    for (i, &c) in channels.iter().enumerate() {
        let level = i + 1;
        let path = level_path(dir, id, level);
        if !path.exists() {
            return Err(Error::MissingFeatureLevel { id: id.into(), level });
        }
        let pfm = read_pfm_raw(&path)?;
        let (h, w) = (height >> level, width >> level);
        if pfm.channels != 1 || pfm.width != w || pfm.height != c * h {
            return Err(Error::FeatureMismatch {
                id: id.into(),
                reason: format!(
                    "level {level} is {}x{} with {} channels, expected {w}x{} gray",
                    pfm.width,
                    pfm.height,
                    pfm.channels,
                    c * h
                ),
            });
        }
        out.push(Tensor::from_vec([1, c, h, w], pfm.data));
    }
    Ok(CaptionPyramid {
        levels: out,
        source: CaptionSource::Precomputed,
    })
}
