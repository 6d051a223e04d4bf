//! Command-line front end. Every subcommand resolves a [`RunConfig`] from
//! `--config`, its own flags and `--set key=value` overrides (in that order),
//! runs one pipeline stage and writes a run manifest next to its outputs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use caphdr2ir::ablation::{ablate, predict_split, sweep_loss_weights};
use caphdr2ir::checkpoint::load_model;
use caphdr2ir::config::{RunConfig, Variant, VARIANTS};
use caphdr2ir::datasets::{generate_synthetic, load_split, DatasetSpec, Split};
use caphdr2ir::image_io::{read_radiance_hdr, render_bracket, write_png, BitDepth};
use caphdr2ir::metrics::{evaluate_dirs, write_report, EvalOptions};
use caphdr2ir::trainer::{parse_log, Trainer};
use caphdr2ir::{tonemap, Error};
use clap::{Args, Parser, Subcommand};

mod manifest;

pub use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "caphdr2ir", version, about = "HDR to infrared translation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Tone-map a Radiance HDR image to an SDR PNG.
    Tonemap(TonemapArgs),
    /// Render exposure brackets of an HDR image.
    Bracket(BracketArgs),
    /// Generate a synthetic paired dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Predict an infrared image with a trained checkpoint.
    Infer(InferArgs),
    /// Compare predicted and ground-truth infrared directories.
    Eval(EvalArgs),
    /// Train and evaluate ablation variants or the loss-weight grid.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TonemapArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// tonemap.key
    #[arg(long)]
    pub key: Option<f64>,
    /// tonemap.epsilon
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, default_value_t = 8)]
    pub bit_depth: u32,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct BracketArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Comma-separated EV offsets.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-3,0,3")]
    pub evs: Vec<f32>,
    /// Defaults to the input's directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Dataset root.
    #[arg(long, env = "CAPHDR2IR_DATA")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub train: usize,
    #[arg(long, default_value_t = 4)]
    pub test: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// tonemap.key used for the IR targets
    #[arg(long)]
    pub key: Option<f64>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    /// variant (sets the input and caption toggles)
    #[arg(long)]
    pub variant: Option<String>,
    /// train.epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// train.batch_size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// train.lr
    #[arg(long)]
    pub lr: Option<f64>,
    /// train.seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// loss.alpha
    #[arg(long)]
    pub alpha: Option<f64>,
    /// loss.beta
    #[arg(long)]
    pub beta: Option<f64>,
    /// train.checkpoint_every
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset root containing `train/`.
    #[arg(long, env = "CAPHDR2IR_DATA")]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Image id for precomputed caption features; defaults to the file stem.
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Report directory; defaults to the prediction directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub allow_partial: bool,
    /// eval.quantize_8bit
    #[arg(long)]
    pub quantize_8bit: bool,
    /// eval.lpips: proxy, pretrained or none
    #[arg(long)]
    pub lpips: Option<String>,
    /// Row label in report.md.
    #[arg(long, default_value = "prediction")]
    pub label: String,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Dataset root containing `train/` and `test/`.
    #[arg(long, env = "CAPHDR2IR_DATA")]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `all` or a comma-separated list of variant names.
    #[arg(long, default_value = "all")]
    pub variants: String,
    /// Run the 3x3 alpha/beta grid instead of the variant matrix.
    #[arg(long)]
    pub sweep_loss_weights: bool,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

/// Failure of one invocation, mapped to an exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnknownVariant(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn resolve(cfg: &ConfigArgs, flags: &[(&str, Option<String>)]) -> CliResult<RunConfig> {
    let mut rc = match &cfg.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (key, value) in flags {
        if let Some(v) = value {
            rc.set(key, &caphdr2ir::config::parse_value(v)?)?;
        }
    }
    for a in &cfg.set {
        rc.set_str(a)?;
    }
    rc.validate()?;
    Ok(rc)
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

impl TrainFlags {
    fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("variant", self.variant.as_deref().map(quoted)),
            ("train.epochs", self.epochs.map(|v| v.to_string())),
            ("train.batch_size", self.batch_size.map(|v| v.to_string())),
            ("train.lr", self.lr.map(|v| format!("{v:?}"))),
            ("train.seed", self.seed.map(|v| v.to_string())),
            ("loss.alpha", self.alpha.map(|v| format!("{v:?}"))),
            ("loss.beta", self.beta.map(|v| format!("{v:?}"))),
            ("train.checkpoint_every", self.checkpoint_every.map(|v| v.to_string())),
        ]
    }
}

fn file_stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

fn run_manifest_path_for_file(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".run.toml");
    PathBuf::from(s)
}

fn ensure_parent(p: &Path) -> CliResult<()> {
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| {
            CliError::Runtime(Error::Io {
                path: parent.into(),
                source: e,
            })
        })?;
    }
    Ok(())
}

fn cmd_tonemap(a: &TonemapArgs, m: &mut RunManifest) -> CliResult<()> {
    let rc = resolve(
        &a.cfg,
        &[
            ("tonemap.key", a.key.map(|v| format!("{v:?}"))),
            ("tonemap.epsilon", a.epsilon.map(|v| format!("{v:?}"))),
        ],
    )?;
    let depth = BitDepth::from_bits(a.bit_depth).map_err(|e| CliError::Usage(e.to_string()))?;
    let hdr = read_radiance_hdr(&a.input)?;
    let sdr = tonemap(&hdr, &rc.tonemap)?;
    ensure_parent(&a.out)?;
    write_png(&a.out, &sdr, depth)?;
    m.config(&rc);
    m.artifact(&a.out);
    m.write(&run_manifest_path_for_file(&a.out))?;
    Ok(())
}

fn cmd_bracket(a: &BracketArgs, m: &mut RunManifest) -> CliResult<()> {
    let rc = resolve(&a.cfg, &[])?;
    if a.evs.is_empty() {
        return Err(CliError::Usage("--evs needs at least one value".into()));
    }
    let hdr = read_radiance_hdr(&a.input)?;
    let dir = a
        .out_dir
        .clone()
        .or_else(|| a.input.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    std::fs::create_dir_all(&dir).map_err(|e| {
        CliError::Runtime(Error::Io {
            path: dir.clone(),
            source: e,
        })
    })?;
    let stem = file_stem(&a.input);
    for (ev, img) in a.evs.iter().zip(render_bracket(&hdr, &a.evs)) {
        let path = dir.join(format!("{stem}_ev{ev:+}.png"));
        write_png(&path, &img, BitDepth::Eight)?;
        m.artifact(&path);
    }
    m.config(&rc);
    m.write(&dir.join(format!("{stem}_bracket.run.toml")))?;
    Ok(())
}

fn cmd_synth(a: &SynthArgs, m: &mut RunManifest) -> CliResult<()> {
    let rc = resolve(&a.cfg, &[("tonemap.key", a.key.map(|v| format!("{v:?}")))])?;
    let size_unit = 1usize << rc.scales;
    if !a.size.is_multiple_of(size_unit) {
        return Err(CliError::Usage(format!("--size must be a multiple of {size_unit}")));
    }
    for (split, n) in [(Split::Train, a.train), (Split::Test, a.test)] {
        if n > 0 {
            let spec = generate_synthetic(n, a.size, a.seed, &a.out, split, &rc.tonemap)?;
            m.artifact(&spec.dir());
        }
    }
    m.config(&rc);
    m.seed = Some(a.seed);
    m.write(&a.out.join("run_manifest.toml"))?;
    Ok(())
}

fn cmd_train(a: &TrainArgs, m: &mut RunManifest) -> CliResult<()> {
    let fresh = match &a.resume {
        Some(_) => {
            let f = &a.flags;
            let locked = f.variant.is_some()
                || f.batch_size.is_some()
                || f.lr.is_some()
                || f.seed.is_some()
                || f.alpha.is_some()
                || f.beta.is_some()
                || a.cfg.config.is_some()
                || !a.cfg.set.is_empty();
            if locked {
                return Err(CliError::Usage(
                    "--resume takes its config from the checkpoint; only --epochs and --checkpoint-every may change"
                        .into(),
                ));
            }
            None
        }
        None => Some(resolve(&a.cfg, &a.flags.pairs())?),
    };
    let samples = load_split(&DatasetSpec::new(&a.data, Split::Train))?;
    let mut trainer = match &a.resume {
        Some(ckpt) => {
            // run/checkpoint or run/checkpoints/step_N
            let log_path = ckpt
                .ancestors()
                .skip(1)
                .take(2)
                .map(|run| run.join("log.csv"))
                .find(|p| p.exists());
            let log = match log_path {
                Some(p) => parse_log(&std::fs::read_to_string(&p).map_err(|e| {
                    CliError::Runtime(Error::Io {
                        path: p.clone(),
                        source: e,
                    })
                })?)?,
                None => Vec::new(),
            };
            let mut t = Trainer::resume(ckpt, &samples, log)?;
            if let Some(e) = a.flags.epochs {
                t.model.cfg.train.epochs = e;
            }
            if let Some(c) = a.flags.checkpoint_every {
                t.model.cfg.train.checkpoint_every = c;
            }
            t
        }
        None => Trainer::new(fresh.as_ref().expect("resolved above"), &samples)?,
    };
    let ckpt = trainer.fit(&a.out, |_, row| {
        if row.step % 50 == 0 {
            eprintln!(
                "step {} total {:.5} per {:.5} g {:.4} d {:.4}",
                row.step, row.total, row.per_loss, row.g_loss, row.d_loss
            );
        }
    })?;
    m.config(&trainer.model.cfg);
    m.artifact(&ckpt);
    m.artifact(&a.out.join("log.csv"));
    m.write(&a.out.join("run_manifest.toml"))?;
    Ok(())
}

fn cmd_infer(a: &InferArgs, m: &mut RunManifest) -> CliResult<()> {
    let model = load_model(&a.ckpt)?;
    let hdr = read_radiance_hdr(&a.input)?;
    let id = a.id.clone().unwrap_or_else(|| file_stem(&a.input));
    let ir = model.infer(&hdr, &id)?;
    ensure_parent(&a.out)?;
    write_png(&a.out, &ir, BitDepth::Sixteen)?;
    m.config(&model.cfg);
    m.artifact(&a.out);
    m.write(&run_manifest_path_for_file(&a.out))?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, m: &mut RunManifest) -> CliResult<()> {
    let rc = resolve(
        &a.cfg,
        &[
            ("eval.quantize_8bit", a.quantize_8bit.then(|| "true".to_string())),
            ("eval.lpips", a.lpips.as_deref().map(quoted)),
        ],
    )?;
    let opts = EvalOptions {
        allow_partial: a.allow_partial,
        quantize_8bit: rc.eval_quantize_8bit,
        lpips: rc.lpips_backend(),
    };
    let report = evaluate_dirs(&a.pred, &a.gt, &opts)?;
    let out = a.out.clone().unwrap_or_else(|| a.pred.clone());
    let (csv, md) = write_report(&report, &out, &a.label)?;
    print!("{}", report.to_markdown(&a.label));
    m.config(&rc);
    m.artifact(&csv);
    m.artifact(&md);
    m.write(&out.join("run_manifest.toml"))?;
    Ok(())
}

fn parse_variants(s: &str) -> CliResult<Vec<Variant>> {
    if s == "all" {
        return Ok(VARIANTS.to_vec());
    }
    s.split(',').map(|n| Ok(Variant::by_name(n.trim())?)).collect()
}

fn cmd_ablate(a: &AblateArgs, m: &mut RunManifest) -> CliResult<()> {
    let rc = resolve(&a.cfg, &a.flags.pairs())?;
    let rows = if a.sweep_loss_weights {
        sweep_loss_weights(&rc, &a.data, &a.out)?
    } else {
        let variants = parse_variants(&a.variants)?;
        ablate(&rc, &variants, &a.data, &a.out)?
    };
    let md = a.out.join("ablation.md");
    if let Ok(text) = std::fs::read_to_string(&md) {
        print!("{text}");
    }
    m.config(&rc);
    m.artifact(&a.out.join("ablation.csv"));
    m.artifact(&md);
    for r in &rows {
        m.artifact(&a.out.join(&r.name));
    }
    m.write(&a.out.join("run_manifest.toml"))?;
    Ok(())
}

/// Runs one command line; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let mut manifest = RunManifest::start(&argv);
    let result = match &cli.command {
        Command::Tonemap(a) => cmd_tonemap(a, &mut manifest),
        Command::Bracket(a) => cmd_bracket(a, &mut manifest),
        Command::Synth(a) => cmd_synth(a, &mut manifest),
        Command::Train(a) => cmd_train(a, &mut manifest),
        Command::Infer(a) => cmd_infer(a, &mut manifest),
        Command::Eval(a) => cmd_eval(a, &mut manifest),
        Command::Ablate(a) => cmd_ablate(a, &mut manifest),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Convenience for tests: predict a whole split with a checkpoint.
pub fn predict_with_checkpoint(ckpt: &Path, data: &Path, split: Split, out: &Path) -> caphdr2ir::Result<Vec<PathBuf>> {
    let model = load_model(ckpt)?;
    predict_split(&model, &load_split(&DatasetSpec::new(data, split))?, out)
}
