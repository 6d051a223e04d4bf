//! A configured generator, discriminator and caption backend, plus the
//! per-image input preparation each ablation variant needs.

use crate::caption::{caption_input, CaptionExtractor, CaptionSource};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::image_io::{HdrImage, IrImage};
use crate::inputs::{hdr_input, sdr_input};
use crate::losses::Discriminator;
use crate::nn::params::fnv1a;
use crate::nn::Tensor;

/// Network inputs of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInput {
    /// `[1, 3, h, w]`.
    pub x: Tensor<f32>,
    /// One `[1, C_i, h / 2^i, w / 2^i]` map per scale, when the variant uses captions.
    pub captions: Option<Vec<Tensor<f32>>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub caption: Option<CaptionExtractor>,
}

/// Seed of one named component, derived from the run seed.
pub fn component_seed(seed: u64, name: &str) -> u64 {
    fnv1a(format!("{seed}/{name}").as_bytes())
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.train.seed;
        Ok(Model {
            generator: Generator::new(cfg.generator_config(), component_seed(seed, "generator"))?,
            discriminator: Discriminator::new(cfg.disc_channels, component_seed(seed, "discriminator")),
            caption: if cfg.caption_branch {
                Some(CaptionExtractor::new(cfg.caption_config())?)
            } else {
                None
            },
            cfg: cfg.clone(),
        })
    }

    /// SHA-256 of the frozen caption backbone, if any.
    pub fn caption_checksum(&self) -> Option<String> {
        self.caption.as_ref().map(|c| c.backbone().checksum())
    }

    /// Generator input and caption pyramid for one HDR image. HDR variants
    /// feed the log-encoded radiance; SDR variants feed the 8-bit tone-mapped
    /// image to both the generator and the caption branch.
    pub fn prepare(&self, hdr: &HdrImage, id: &str) -> Result<PreparedInput> {
        let cfg = &self.cfg;
        cfg.generator_config().check_input(hdr.height(), hdr.width())?;
        let sdr = if cfg.hdr_input {
            None
        } else {
            Some(sdr_input(hdr, &cfg.tonemap)?)
        };
        let x = match &sdr {
            Some(s) => s.clone(),
            None => hdr_input(hdr, cfg.input_max),
        };
        let captions = match &self.caption {
            None => None,
            Some(ex) => {
                let pyramid = match (ex.config.kind, &sdr) {
                    (CaptionSource::Standin, Some(s)) => ex.from_tensor(s),
                    (CaptionSource::Standin, None) => {
                        ex.from_tensor(&caption_input(hdr, cfg.caption_preprocess, &cfg.tonemap)?)
                    }
                    (CaptionSource::Precomputed, _) => ex.extract(hdr, id, &cfg.tonemap)?,
                };
                Some(pyramid.levels)
            }
        };
        Ok(PreparedInput { x, captions })
    }

    /// Evaluation-mode forward of one image.
    pub fn infer(&self, hdr: &HdrImage, id: &str) -> Result<IrImage> {
        let p = self.prepare(hdr, id)?;
        let y = self.generator.infer(&p.x, p.captions.as_deref())?;
        let [_, _, h, w] = y.shape();
        IrImage::new(w, h, y.into_vec())
    }

    /// Evaluation-mode forward of prepared inputs.
    pub fn infer_prepared(&self, p: &PreparedInput) -> Result<Tensor<f32>> {
        self.generator.infer(&p.x, p.captions.as_deref())
    }

    pub fn num_params(&self) -> usize {
        self.generator.num_params()
    }

    pub fn check_target(&self, ir: &IrImage, hdr: &HdrImage, id: &str) -> Result<()> {
        if (ir.width(), ir.height()) != (hdr.width(), hdr.height()) {
            return Err(Error::PairDimMismatch {
                id: id.into(),
                hdr: (hdr.width(), hdr.height()),
                ir: (ir.width(), ir.height()),
            });
        }
        Ok(())
    }
}
