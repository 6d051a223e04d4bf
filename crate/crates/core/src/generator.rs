//! The image-generation branch: a strided multi-scale encoder with caption
//! fusion at every scale and a decoder of up-sampling fusion blocks ending in
//! a sigmoid head.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Bind, Conv2d, ConvTranspose2d, Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    /// Number of encoder scales; level `i` runs at `1 / 2^i` resolution.
    pub scales: usize,
    pub enc_channels: Vec<usize>,
    /// Channel widths of the caption pyramid; `None` runs the encoder visual-only.
    pub caption_channels: Option<Vec<usize>>,
    /// Attention-weighted fusion; without it captions are concatenated as-is.
    pub use_caption_fusion: bool,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        Self::with_channels(vec![16, 32, 64, 128])
    }

    pub fn full() -> Self {
        Self::with_channels(vec![64, 128, 256, 512])
    }

    pub fn with_channels(enc_channels: Vec<usize>) -> Self {
        GeneratorConfig {
            scales: enc_channels.len(),
            caption_channels: Some(enc_channels.clone()),
            enc_channels,
            use_caption_fusion: true,
            in_channels: 3,
            out_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales < 2 {
            return Err(Error::Config(format!(
                "generator needs at least 2 scales, got {}",
                self.scales
            )));
        }
        if self.enc_channels.len() != self.scales {
            return Err(Error::Config(format!(
                "{} encoder widths for {} scales",
                self.enc_channels.len(),
                self.scales
            )));
        }
        if let Some(cap) = &self.caption_channels {
            if cap.len() != self.scales {
                return Err(Error::Config(format!(
                    "{} caption widths for {} scales",
                    cap.len(),
                    self.scales
                )));
            }
        }
        if self.out_channels != 1 {
            return Err(Error::Config("generator output must be single-channel".into()));
        }
        if self.in_channels == 0 || self.enc_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Inputs must be divisible by `2^scales`.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = 1 << self.scales;
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::ShapeMismatch(format!("input {h}x{w} is not divisible by {m}")));
        }
        Ok(())
    }

    /// `(channels, height, width)` of encoder level `i` (1-based) for an `h x w` input.
    pub fn level_shape(&self, i: usize, h: usize, w: usize) -> (usize, usize, usize) {
        (self.enc_channels[i - 1], h >> i, w >> i)
    }
}

/// Spatial attention over caption features.
///
/// `att = sigmoid(conv(relu(conv([f_vis, f_cap]))))` is a one-channel map
/// that gates every caption channel; the output is `[att * f_cap, f_vis]`.
#[derive(Clone, Debug)]
pub struct CaptionFusion {
    pub hidden: Conv2d,
    pub score: Conv2d,
}

impl CaptionFusion {
    pub fn new(prefix: &str, c_vis: usize, c_cap: usize) -> Self {
        let hidden = ((c_vis + c_cap) / 2).max(1);
        CaptionFusion {
            hidden: Conv2d::same3(format!("{prefix}.hidden"), c_vis + c_cap, hidden),
            score: Conv2d::same3(format!("{prefix}.score"), hidden, 1),
        }
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        self.hidden.init(store, seed);
        self.score.init(store, seed);
    }

    /// Returns `(fused, attention)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bind<'_, T>, f_vis: Var, f_cap: Var) -> Result<(Var, Var)> {
        let [_, _, vh, vw] = g.value(f_vis).shape();
        let [_, _, ch, cw] = g.value(f_cap).shape();
        if (vh, vw) != (ch, cw) {
            return Err(Error::ShapeMismatch(format!(
                "caption features {ch}x{cw} vs visual features {vh}x{vw}"
            )));
        }
        let both = g.concat(f_vis, f_cap);
        let h = self.hidden.forward(g, p, both);
        let h = g.relu(h);
        let s = self.score.forward(g, p, h);
        let att = g.sigmoid(s);
        let aligned = g.spatial_mul(att, f_cap);
        Ok((g.concat(aligned, f_vis), att))
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    down: Conv2d,
    down_bn: BatchNorm2d,
    refine: Conv2d,
    refine_bn: BatchNorm2d,
    fusion: Option<CaptionFusion>,
    /// 1x1 projection of the fused features back to the level width.
    project: Option<Conv2d>,
}

/// Decoder block: `up = conv(convT(f_de))` doubles the resolution, the skip is
/// center-cropped to match, and `relu(bn(conv([skip, up])))` fuses both.
#[derive(Clone, Debug)]
pub struct UpsampleFusion {
    pub up: ConvTranspose2d,
    pub up_conv: Conv2d,
    pub fuse: Conv2d,
    pub bn: BatchNorm2d,
}

impl UpsampleFusion {
    pub fn new(prefix: &str, c_in: usize, c_skip: usize, c_out: usize) -> Self {
        UpsampleFusion {
            up: ConvTranspose2d::new(format!("{prefix}.up"), c_in, c_out, 2, 2),
            up_conv: Conv2d::same3(format!("{prefix}.up_conv"), c_out, c_out),
            fuse: Conv2d::same3(format!("{prefix}.fuse"), c_skip + c_out, c_out),
            bn: BatchNorm2d::new(format!("{prefix}.bn"), c_out),
        }
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        self.up.init(store, seed);
        self.up_conv.init(store, seed);
        self.fuse.init(store, seed);
        self.bn.init(store);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bind<'_, T>, f_de: Var, skip: Var) -> Result<Var> {
        let t = self.up.forward(g, p, f_de);
        let up = self.up_conv.forward(g, p, t);
        let [_, _, uh, uw] = g.value(up).shape();
        let [_, _, sh, sw] = g.value(skip).shape();
        if sh < uh || sw < uw {
            return Err(Error::ShapeMismatch(format!(
                "skip {sh}x{sw} smaller than upsampled {uh}x{uw}"
            )));
        }
        let skip = g.center_crop(skip, uh, uw);
        let cat = g.concat(skip, up);
        let y = self.fuse.forward(g, p, cat);
        let y = self.bn.forward(g, p, y);
        Ok(g.relu(y))
    }
}

/// Everything a forward pass produced, for inspection by callers and tests.
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    /// `[n, 1, h, w]` in `(0, 1)`.
    pub output: Var,
    /// Encoder features per level after fusion/projection.
    pub levels: Vec<Var>,
    /// Concatenated caption/visual features per level (before projection).
    pub fused: Vec<Var>,
    /// Attention maps per level when caption fusion is enabled.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub cfg: GeneratorConfig,
    encoder: Vec<EncoderLevel>,
    decoder: Vec<UpsampleFusion>,
    head: Conv2d,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.scales;
        let ch = &cfg.enc_channels;
        let mut encoder = Vec::with_capacity(s);
        for i in 1..=s {
            let cin = if i == 1 { cfg.in_channels } else { ch[i - 2] };
            let c = ch[i - 1];
            let prefix = format!("enc{i}");
            let (fusion, project) = match &cfg.caption_channels {
                Some(cap) => {
                    let cc = cap[i - 1];
                    (
                        cfg.use_caption_fusion
                            .then(|| CaptionFusion::new(&format!("{prefix}.fusion"), c, cc)),
                        Some(Conv2d::new(format!("{prefix}.project"), c + cc, c, 1, 1, 0)),
                    )
                }
                None => (None, None),
            };
            encoder.push(EncoderLevel {
                down: Conv2d::new(format!("{prefix}.down"), cin, c, 3, 2, 1),
                down_bn: BatchNorm2d::new(format!("{prefix}.down_bn"), c),
                refine: Conv2d::same3(format!("{prefix}.refine"), c, c),
                refine_bn: BatchNorm2d::new(format!("{prefix}.refine_bn"), c),
                fusion,
                project,
            });
        }
        // dec{i} lifts level i+1 to level i; dec0 reaches full resolution
        // using the network input as its skip.
        let mut decoder = Vec::with_capacity(s);
        for i in (0..s).rev() {
            let c_in = ch[i];
            let (c_skip, c_out) = if i == 0 {
                (cfg.in_channels, ch[0])
            } else {
                (ch[i - 1], ch[i - 1])
            };
            decoder.push(UpsampleFusion::new(&format!("dec{i}"), c_in, c_skip, c_out));
        }
        let head = Conv2d::new("head", ch[0], cfg.out_channels, 1, 1, 0);

        let mut params = ParamStore::new("generator");
        for lvl in &encoder {
            lvl.down.init(&mut params, seed);
            lvl.down_bn.init(&mut params);
            lvl.refine.init(&mut params, seed);
            lvl.refine_bn.init(&mut params);
            if let Some(f) = &lvl.fusion {
                f.init(&mut params, seed);
            }
            if let Some(p) = &lvl.project {
                p.init(&mut params, seed);
            }
        }
        for d in &decoder {
            d.init(&mut params, seed);
        }
        head.init(&mut params, seed);
        Ok(Generator {
            cfg,
            encoder,
            decoder,
            head,
            params,
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            cfg: self.cfg.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
            params: self.params.cast(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_trainable()
    }

    /// Encoder pass. `captions` must hold one feature map per scale.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        p: &Bind<'_, T>,
        x: Var,
        captions: Option<&[Var]>,
    ) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>)> {
        let [_, c, h, w] = g.value(x).shape();
        if c != self.cfg.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "expected {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        self.cfg.check_input(h, w)?;
        if let Some(caps) = captions {
            if caps.len() != self.cfg.scales {
                return Err(Error::ShapeMismatch(format!(
                    "caption pyramid has {} levels, generator has {} scales",
                    caps.len(),
                    self.cfg.scales
                )));
            }
        }
        let mut levels = Vec::with_capacity(self.cfg.scales);
        let mut fused_all = Vec::new();
        let mut attention = Vec::new();
        let mut cur = x;
        for (i, lvl) in self.encoder.iter().enumerate() {
            let y = lvl.down.forward(g, p, cur);
            let y = lvl.down_bn.forward(g, p, y);
            let y = g.relu(y);
            let y = lvl.refine.forward(g, p, y);
            let y = lvl.refine_bn.forward(g, p, y);
            let mut y = g.relu(y);
            match (captions, &lvl.project) {
                (Some(caps), Some(project)) => {
                    let cap = caps[i];
                    let [_, cc, chh, cww] = g.value(cap).shape();
                    let [_, _, yh, yw] = g.value(y).shape();
                    if (chh, cww) != (yh, yw) {
                        return Err(Error::ShapeMismatch(format!(
                            "caption level {} is {chh}x{cww}, encoder level is {yh}x{yw}",
                            i + 1
                        )));
                    }
                    let want = self.cfg.caption_channels.as_ref().map(|c| c[i]);
                    if Some(cc) != want {
                        return Err(Error::ShapeMismatch(format!(
                            "caption level {} has {cc} channels, expected {want:?}",
                            i + 1
                        )));
                    }
                    let fused = match &lvl.fusion {
                        Some(f) => {
                            let (fused, att) = f.forward(g, p, y, cap)?;
                            attention.push(att);
                            fused
                        }
                        None => g.concat(cap, y),
                    };
                    fused_all.push(fused);
                    y = project.forward(g, p, fused);
                }
                (Some(_), None) => {
                    return Err(Error::ShapeMismatch(
                        "captions given to a generator without a caption branch".into(),
                    ));
                }
                (None, _) => {}
            }
            levels.push(y);
            cur = y;
        }
        Ok((levels, fused_all, attention))
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bind<'_, T>,
        x: Var,
        captions: Option<&[Var]>,
    ) -> Result<GeneratorOutput> {
        let (levels, fused, attention) = self.encode(g, p, x, captions)?;
        let s = self.cfg.scales;
        let mut d = levels[s - 1];
        for (k, block) in self.decoder.iter().enumerate() {
            let i = s - 1 - k;
            let skip = if i == 0 { x } else { levels[i - 1] };
            d = block.forward(g, p, d, skip)?;
        }
        let logits = self.head.forward(g, p, d);
        let output = g.sigmoid(logits);
        Ok(GeneratorOutput {
            output,
            levels,
            fused,
            attention,
        })
    }

    /// Evaluation-mode forward on plain tensors.
    pub fn infer(&self, x: &Tensor<T>, captions: Option<&[Tensor<T>]>) -> Result<Tensor<T>> {
        let mut g = Graph::new(false);
        let xv = g.constant(x.clone());
        let caps: Option<Vec<Var>> = captions.map(|c| c.iter().map(|t| g.constant(t.clone())).collect());
        let p = self.params.bind(false);
        let out = self.forward(&mut g, &p, xv, caps.as_deref())?;
        Ok(g.value(out.output).clone())
    }
}
