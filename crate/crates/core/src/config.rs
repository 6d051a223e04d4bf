//! Run configuration: a flat set of dotted keys read from TOML.
//!
//! Files may use tables or dotted keys interchangeably (`[train]` plus
//! `lr = 1e-3`, or `train.lr = 1e-3`). Unknown keys are rejected. The
//! canonical form written by [`RunConfig::to_toml`] lists every key in
//! sorted order; its SHA-256 is the config hash.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::caption::{CaptionBackendConfig, CaptionSource};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::{ExtractorKind, GanVariant, LossWeights, PerceptualExtractorConfig};
use crate::metrics::LpipsBackend;
use crate::tonemap::TonemapParams;
use crate::trainer::TrainConfig;

/// The input/caption toggles of one ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub hdr_input: bool,
    /// Tone-map before captioning; only meaningful with HDR input.
    pub preprocessing: bool,
    pub caption_branch: bool,
    /// Attention fusion; only meaningful with the caption branch.
    pub caption_fusion: bool,
}

const fn variant(name: &'static str, hdr: bool, pre: bool, cap: bool, fus: bool) -> Variant {
    Variant {
        name,
        hdr_input: hdr,
        preprocessing: pre,
        caption_branch: cap,
        caption_fusion: fus,
    }
}

/// All eight ablation rows, in report order.
pub const VARIANTS: [Variant; 8] = [
    variant("SDR2IR_Baseline", false, false, false, false),
    variant("SDR2IR_V1", false, false, true, false),
    variant("SDR2IR_V2", false, false, true, true),
    variant("HDR2IR_Baseline", true, false, false, false),
    variant("HDR2IR_V1", true, false, true, false),
    variant("HDR2IR_V2", true, false, true, true),
    variant("HDR2IR_V3", true, true, true, false),
    variant("CapHDR2IR", true, true, true, true),
];

impl Variant {
    pub fn by_name(name: &str) -> Result<Variant> {
        VARIANTS
            .iter()
            .copied()
            .find(|v| v.name == name)
            .ok_or_else(|| Error::UnknownVariant(name.to_string()))
    }

    /// The named row matching a set of toggles. Toggles that are not
    /// meaningful for the row are ignored.
    pub fn from_toggles(hdr_input: bool, preprocessing: bool, caption_branch: bool, caption_fusion: bool) -> Variant {
        *VARIANTS
            .iter()
            .find(|v| {
                v.hdr_input == hdr_input
                    && (!hdr_input || !caption_branch || v.preprocessing == preprocessing)
                    && v.caption_branch == caption_branch
                    && (!caption_branch || v.caption_fusion == caption_fusion)
            })
            .expect("every toggle combination maps to a row")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub hdr_input: bool,
    pub caption_branch: bool,
    pub caption_fusion: bool,
    pub scales: usize,
    pub channels: Vec<usize>,
    pub input_max: f64,
    pub disc_channels: usize,

    pub caption_kind: CaptionSource,
    pub caption_seed: u64,
    pub caption_preprocess: bool,
    pub caption_features_dir: Option<PathBuf>,

    pub tonemap: TonemapParams,

    pub loss: LossWeights,
    pub gan_variant: GanVariant,
    pub perceptual_kind: String,
    pub perceptual_taps: Vec<usize>,
    pub perceptual_weights: Vec<f64>,
    pub perceptual_seed: u64,
    pub perceptual_weights_dir: Option<PathBuf>,

    pub train: TrainConfig,

    pub eval_lpips: String,
    pub eval_lpips_dir: Option<PathBuf>,
    pub eval_quantize_8bit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hdr_input: true,
            caption_branch: true,
            caption_fusion: true,
            scales: 4,
            channels: vec![64, 128, 256, 512],
            input_max: crate::inputs::DEFAULT_INPUT_MAX,
            disc_channels: 64,
            caption_kind: CaptionSource::Standin,
            caption_seed: 1,
            caption_preprocess: true,
            caption_features_dir: None,
            tonemap: TonemapParams::default(),
            loss: LossWeights::default(),
            gan_variant: GanVariant::NonSaturating,
            perceptual_kind: "frozen_random".into(),
            perceptual_taps: vec![2, 4, 6],
            perceptual_weights: vec![1.0, 1.0, 1.0],
            perceptual_seed: 2,
            perceptual_weights_dir: None,
            train: TrainConfig::default(),
            eval_lpips: "proxy".into(),
            eval_lpips_dir: None,
            eval_quantize_8bit: false,
        }
    }
}

impl RunConfig {
    /// Laptop-sized preset: narrow widths and a faster optimizer.
    pub fn desk() -> Self {
        let mut c = RunConfig {
            channels: vec![16, 32, 64, 128],
            disc_channels: 16,
            ..Default::default()
        };
        c.train.lr = 2e-3;
        c.train.batch_size = 8;
        c
    }
}

/// Every accepted key, sorted.
pub const KEYS: &[&str] = &[
    "caption.features_dir",
    "caption.kind",
    "caption.preprocess",
    "caption.seed",
    "disc.channels",
    "eval.lpips",
    "eval.lpips_dir",
    "eval.quantize_8bit",
    "loss.alpha",
    "loss.beta",
    "loss.gan_variant",
    "loss.perceptual.kind",
    "loss.perceptual.seed",
    "loss.perceptual.taps",
    "loss.perceptual.weights",
    "loss.perceptual.weights_dir",
    "model.caption_branch",
    "model.caption_fusion",
    "model.channels",
    "model.hdr_input",
    "model.input_max",
    "model.scales",
    "tonemap.epsilon",
    "tonemap.key",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.batch_size",
    "train.checkpoint_every",
    "train.epochs",
    "train.lr",
    "train.seed",
    "variant",
];

fn bad(key: &str, want: &str, v: &Value) -> Error {
    Error::Config(format!("{key}: expected {want}, got {v}"))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| bad(key, "a boolean", v))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(bad(key, "a number", v)),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(bad(key, "a non-negative integer", v)),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    Ok(as_u64(key, v)? as usize)
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| bad(key, "a string", v))
}

fn as_path(key: &str, v: &Value) -> Result<Option<PathBuf>> {
    let s = as_str(key, v)?;
    Ok((!s.is_empty()).then(|| PathBuf::from(s)))
}

fn as_list<T>(key: &str, v: &Value, f: impl Fn(&str, &Value) -> Result<T>) -> Result<Vec<T>> {
    match v {
        Value::Array(a) => a.iter().map(|x| f(key, x)).collect(),
        // comma-separated strings are accepted for command-line convenience
        Value::String(s) => s
            .split(',')
            .map(|p| parse_value(p.trim()).and_then(|x| f(key, &x)))
            .collect(),
        _ => Err(bad(key, "a list", v)),
    }
}

/// Parses a command-line value as a TOML value, falling back to a string.
pub fn parse_value(raw: &str) -> Result<Value> {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => Ok(t.remove("v").expect("key present")),
        Err(_) => Ok(Value::String(raw.to_string())),
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            _ => out.push((key, v.clone())),
        }
    }
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        // `variant` first so explicit toggles in the same file win
        flat.sort_by_key(|(k, _)| k != "variant");
        let mut cfg = RunConfig::default();
        for (k, v) in &flat {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// `key=value` with the value parsed as TOML.
    pub fn set_str(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), &parse_value(v.trim())?)
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "variant" => self.apply_variant(Variant::by_name(as_str(key, v)?)?),
            "model.hdr_input" => self.hdr_input = as_bool(key, v)?,
            "model.caption_branch" => self.caption_branch = as_bool(key, v)?,
            "model.caption_fusion" => self.caption_fusion = as_bool(key, v)?,
            "model.scales" => self.scales = as_usize(key, v)?,
            "model.channels" => self.channels = as_list(key, v, as_usize)?,
            "model.input_max" => self.input_max = as_f64(key, v)?,
            "disc.channels" => self.disc_channels = as_usize(key, v)?,
            "caption.kind" => self.caption_kind = CaptionSource::parse(as_str(key, v)?)?,
            "caption.seed" => self.caption_seed = as_u64(key, v)?,
            "caption.preprocess" => self.caption_preprocess = as_bool(key, v)?,
            "caption.features_dir" => self.caption_features_dir = as_path(key, v)?,
            "tonemap.key" => self.tonemap.key = as_f64(key, v)?,
            "tonemap.epsilon" => self.tonemap.epsilon = as_f64(key, v)?,
            "loss.alpha" => self.loss.alpha = as_f64(key, v)?,
            "loss.beta" => self.loss.beta = as_f64(key, v)?,
            "loss.gan_variant" => self.gan_variant = GanVariant::parse(as_str(key, v)?)?,
            "loss.perceptual.kind" => {
                let s = as_str(key, v)?;
                if s != "frozen_random" && s != "pretrained" {
                    return Err(bad(key, "frozen_random or pretrained", v));
                }
                self.perceptual_kind = s.to_string();
            }
            "loss.perceptual.taps" => self.perceptual_taps = as_list(key, v, as_usize)?,
            "loss.perceptual.weights" => self.perceptual_weights = as_list(key, v, as_f64)?,
            "loss.perceptual.seed" => self.perceptual_seed = as_u64(key, v)?,
            "loss.perceptual.weights_dir" => self.perceptual_weights_dir = as_path(key, v)?,
            "train.batch_size" => self.train.batch_size = as_usize(key, v)?,
            "train.epochs" => self.train.epochs = as_usize(key, v)?,
            "train.lr" => self.train.lr = as_f64(key, v)?,
            "train.adam_beta1" => self.train.adam_beta1 = as_f64(key, v)?,
            "train.adam_beta2" => self.train.adam_beta2 = as_f64(key, v)?,
            "train.seed" => self.train.seed = as_u64(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = as_u64(key, v)?,
            "eval.lpips" => {
                let s = as_str(key, v)?;
                if !matches!(s, "proxy" | "pretrained" | "none") {
                    return Err(bad(key, "proxy, pretrained or none", v));
                }
                self.eval_lpips = s.to_string();
            }
            "eval.lpips_dir" => self.eval_lpips_dir = as_path(key, v)?,
            "eval.quantize_8bit" => self.eval_quantize_8bit = as_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_variant(&mut self, v: Variant) {
        self.hdr_input = v.hdr_input;
        self.caption_preprocess = v.preprocessing;
        self.caption_branch = v.caption_branch;
        self.caption_fusion = v.caption_fusion;
    }

    pub fn variant(&self) -> Variant {
        Variant::from_toggles(
            self.hdr_input,
            self.caption_preprocess,
            self.caption_branch,
            self.caption_fusion,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.generator_config().validate()?;
        self.caption_config().validate()?;
        self.perceptual_config().validate()?;
        self.loss.validate()?;
        self.tonemap.validate()?;
        self.train.validate()?;
        if !(self.input_max > 0.0) || !self.input_max.is_finite() {
            return Err(Error::Config("model.input_max must be positive".into()));
        }
        if self.disc_channels == 0 {
            return Err(Error::Config("disc.channels must be positive".into()));
        }
        if self.perceptual_kind == "pretrained" && self.perceptual_weights_dir.is_none() {
            return Err(Error::Config(
                "pretrained perceptual extractor needs loss.perceptual.weights_dir".into(),
            ));
        }
        if self.eval_lpips == "pretrained" && self.eval_lpips_dir.is_none() {
            return Err(Error::Config("pretrained LPIPS needs eval.lpips_dir".into()));
        }
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            scales: self.scales,
            enc_channels: self.channels.clone(),
            caption_channels: self.caption_branch.then(|| self.channels.clone()),
            use_caption_fusion: self.caption_fusion,
            in_channels: 3,
            out_channels: 1,
        }
    }

    pub fn caption_config(&self) -> CaptionBackendConfig {
        CaptionBackendConfig {
            kind: self.caption_kind,
            standin_seed: self.caption_seed,
            standin_channels: self.channels.clone(),
            preprocess: self.caption_preprocess,
            features_dir: self.caption_features_dir.clone(),
        }
    }

    pub fn perceptual_config(&self) -> PerceptualExtractorConfig {
        let kind = match (&*self.perceptual_kind, &self.perceptual_weights_dir) {
            ("pretrained", Some(dir)) => ExtractorKind::Pretrained(dir.clone()),
            _ => ExtractorKind::FrozenRandom {
                seed: self.perceptual_seed,
            },
        };
        PerceptualExtractorConfig {
            kind,
            tap_depths: self.perceptual_taps.clone(),
            layer_weights: self.perceptual_weights.clone(),
            ..Default::default()
        }
    }

    pub fn lpips_backend(&self) -> Option<LpipsBackend> {
        match &*self.eval_lpips {
            "proxy" => Some(LpipsBackend::Proxy),
            "pretrained" => self.eval_lpips_dir.clone().map(LpipsBackend::Pretrained),
            _ => None,
        }
    }

    /// Sorted `(key, value)` pairs in TOML syntax.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| format!("[{}]", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "));
        let flist = |v: &[f64]| format!("[{}]", v.iter().map(|x| fmt_f(*x)).collect::<Vec<_>>().join(", "));
        let s = |v: &str| Value::String(v.to_string()).to_string();
        let b = |v: bool| v.to_string();
        let mut out = vec![
            ("caption.features_dir", s(&path_str(&self.caption_features_dir))),
            ("caption.kind", s(self.caption_kind.as_str())),
            ("caption.preprocess", b(self.caption_preprocess)),
            ("caption.seed", self.caption_seed.to_string()),
            ("disc.channels", self.disc_channels.to_string()),
            ("eval.lpips", s(&self.eval_lpips)),
            ("eval.lpips_dir", s(&path_str(&self.eval_lpips_dir))),
            ("eval.quantize_8bit", b(self.eval_quantize_8bit)),
            ("loss.alpha", fmt_f(self.loss.alpha)),
            ("loss.beta", fmt_f(self.loss.beta)),
            ("loss.gan_variant", s(self.gan_variant.as_str())),
            ("loss.perceptual.kind", s(&self.perceptual_kind)),
            ("loss.perceptual.seed", self.perceptual_seed.to_string()),
            ("loss.perceptual.taps", list(&self.perceptual_taps)),
            ("loss.perceptual.weights", flist(&self.perceptual_weights)),
            (
                "loss.perceptual.weights_dir",
                s(&path_str(&self.perceptual_weights_dir)),
            ),
            ("model.caption_branch", b(self.caption_branch)),
            ("model.caption_fusion", b(self.caption_fusion)),
            ("model.channels", list(&self.channels)),
            ("model.hdr_input", b(self.hdr_input)),
            ("model.input_max", fmt_f(self.input_max)),
            ("model.scales", self.scales.to_string()),
            ("tonemap.epsilon", fmt_f(self.tonemap.epsilon)),
            ("tonemap.key", fmt_f(self.tonemap.key)),
            ("train.adam_beta1", fmt_f(self.train.adam_beta1)),
            ("train.adam_beta2", fmt_f(self.train.adam_beta2)),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.checkpoint_every", self.train.checkpoint_every.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.lr", fmt_f(self.train.lr)),
            ("train.seed", self.train.seed.to_string()),
        ];
        out.sort_by_key(|(k, _)| *k);
        out
    }

    /// Canonical TOML with dotted keys; `variant` is a comment since the
    /// toggles already determine it.
    pub fn to_toml(&self) -> String {
        let mut s = format!("# variant: {}\n", self.variant().name);
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// SHA-256 of the canonical form, hex.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Floats always carry a decimal point or exponent so they re-parse as floats.
fn fmt_f(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}
