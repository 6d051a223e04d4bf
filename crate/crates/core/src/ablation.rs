//! Variant matrix and loss-weight sweep: train, infer and evaluate each
//! configuration on the same data and seeds, then tabulate.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{RunConfig, Variant};
use crate::datasets::{load_split, DatasetSpec, PairedSample, Split};
use crate::error::{Error, Result};
use crate::image_io::{write_png, BitDepth};
use crate::metrics::{evaluate_dirs, write_report, EvalOptions, MetricMeans, TABLE_HEADERS};
use crate::model::Model;
use crate::trainer::Trainer;

/// The loss-weight grid, outer loop over alpha.
pub const SWEEP_VALUES: [f64; 3] = [0.1, 1.0, 10.0];
pub const DEFAULT_WEIGHTS: (f64, f64) = (10.0, 0.1);

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub alpha: f64,
    pub beta: f64,
    /// The reference loss weights.
    pub is_default: bool,
    pub params: usize,
    pub means: MetricMeans,
    pub lpips_proxy: bool,
    /// Caption backbone checksum identical before and after training.
    pub caption_frozen: bool,
}

pub const CSV_HEADER: [&str; 11] = [
    "name",
    "alpha",
    "beta",
    "default",
    "params",
    "psnr_db",
    "ssim",
    "mse",
    "lpips",
    "lpips_proxy",
    "caption_frozen",
];

/// Writes every prediction of `samples` as a 16-bit PNG named `<id>.png`.
pub fn predict_split(model: &Model, samples: &[PairedSample], out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    samples
        .iter()
        .map(|s| {
            let path = out.join(format!("{}.png", s.id));
            write_png(&path, &model.infer(&s.hdr, &s.id)?, BitDepth::Sixteen)?;
            Ok(path)
        })
        .collect()
}

/// Trains `cfg` on `train`, predicts `test`, and evaluates against the test
/// split's IR directory. Artifacts go under `out`.
pub fn run_one(
    cfg: &RunConfig,
    name: &str,
    train: &[PairedSample],
    test: &[PairedSample],
    test_spec: &DatasetSpec,
    out: &Path,
) -> Result<AblationRow> {
    let mut trainer = Trainer::new(cfg, train)?;
    let before = trainer.model.caption_checksum();
    trainer.fit(&out.join("train"), |_, _| {})?;
    let after = trainer.model.caption_checksum();
    let pred = out.join("pred");
    predict_split(&trainer.model, test, &pred)?;
    let opts = EvalOptions {
        allow_partial: false,
        quantize_8bit: cfg.eval_quantize_8bit,
        lpips: cfg.lpips_backend(),
    };
    let report = evaluate_dirs(&pred, &test_spec.dir().join("ir"), &opts)?;
    write_report(&report, out, name)?;
    Ok(AblationRow {
        name: name.to_string(),
        alpha: cfg.loss.alpha,
        beta: cfg.loss.beta,
        is_default: (cfg.loss.alpha, cfg.loss.beta) == DEFAULT_WEIGHTS,
        params: trainer.model.num_params(),
        means: report.means,
        lpips_proxy: report.lpips_proxy,
        caption_frozen: before == after,
    })
}

fn load_both(data_root: &Path) -> Result<(Vec<PairedSample>, Vec<PairedSample>, DatasetSpec)> {
    let train = load_split(&DatasetSpec::new(data_root, Split::Train))?;
    let test_spec = DatasetSpec::new(data_root, Split::Test);
    let test = load_split(&test_spec)?;
    Ok((train, test, test_spec))
}

/// One row per variant, all sharing `base`'s seeds and hyperparameters.
pub fn ablate(base: &RunConfig, variants: &[Variant], data_root: &Path, out: &Path) -> Result<Vec<AblationRow>> {
    let (train, test, test_spec) = load_both(data_root)?;
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut cfg = base.clone();
        cfg.apply_variant(*v);
        rows.push(run_one(&cfg, v.name, &train, &test, &test_spec, &out.join(v.name))?);
    }
    write_tables(&rows, out, Table::Variants)?;
    Ok(rows)
}

/// The 3x3 alpha/beta grid on `base`'s variant.
pub fn sweep_loss_weights(base: &RunConfig, data_root: &Path, out: &Path) -> Result<Vec<AblationRow>> {
    let (train, test, test_spec) = load_both(data_root)?;
    let mut rows = Vec::with_capacity(9);
    for alpha in SWEEP_VALUES {
        for beta in SWEEP_VALUES {
            let mut cfg = base.clone();
            cfg.loss.alpha = alpha;
            cfg.loss.beta = beta;
            let name = format!("alpha={alpha}_beta={beta}");
            rows.push(run_one(&cfg, &name, &train, &test, &test_spec, &out.join(&name))?);
        }
    }
    write_tables(&rows, out, Table::Sweep)?;
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Table {
    Variants,
    Sweep,
}

pub fn render_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        let m = &r.means;
        w.write_record([
            r.name.clone(),
            format!("{}", r.alpha),
            format!("{}", r.beta),
            r.is_default.to_string(),
            r.params.to_string(),
            format!("{}", m.psnr_db),
            format!("{}", m.ssim),
            format!("{}", m.mse),
            m.lpips.map(|v| format!("{v}")).unwrap_or_default(),
            r.lpips_proxy.to_string(),
            r.caption_frozen.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("ablation.csv", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn parse_csv(text: &str) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(Error::Config(format!("unexpected ablation.csv header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::Config(format!("bad number {:?} in ablation.csv", &rec[i])))
        };
        let b = |i: usize| &rec[i] == "true";
        rows.push(AblationRow {
            name: rec[0].to_string(),
            alpha: f(1)?,
            beta: f(2)?,
            is_default: b(3),
            params: rec[4]
                .parse()
                .map_err(|_| Error::Config("bad parameter count".into()))?,
            means: MetricMeans {
                psnr_db: f(5)?,
                ssim: f(6)?,
                mse: f(7)?,
                lpips: if rec[8].is_empty() { None } else { Some(f(8)?) },
            },
            lpips_proxy: b(9),
            caption_frozen: b(10),
        });
    }
    Ok(rows)
}

fn mark(b: bool) -> &'static str {
    if b {
        "✓"
    } else {
        "✗"
    }
}

pub fn render_markdown(rows: &[AblationRow], table: Table) -> String {
    let mut s = String::new();
    let metrics = TABLE_HEADERS.join(" | ");
    match table {
        Table::Variants => {
            let _ = writeln!(
                s,
                "| Method | HDR Input | Pre-Processing | Caption Branch | Caption Fusion | Params | {metrics} |"
            );
            let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|---|");
            for r in rows {
                let v = Variant::by_name(&r.name).ok();
                let cell = |f: fn(&Variant) -> Option<bool>| v.as_ref().and_then(f).map(mark).unwrap_or("-");
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {} | {} | {} |",
                    r.name,
                    cell(|v| Some(v.hdr_input)),
                    cell(|v| v.hdr_input.then_some(v.preprocessing)),
                    cell(|v| Some(v.caption_branch)),
                    cell(|v| v.caption_branch.then_some(v.caption_fusion)),
                    r.params,
                    r.means.display_cells().join(" | ")
                );
            }
        }
        Table::Sweep => {
            let _ = writeln!(s, "| α | β | {metrics} | |");
            let _ = writeln!(s, "|---|---|---|---|---|---|---|");
            for r in rows {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} |",
                    r.alpha,
                    r.beta,
                    r.means.display_cells().join(" | "),
                    if r.is_default { "default" } else { "" }
                );
            }
        }
    }
    if rows.iter().any(|r| r.lpips_proxy) {
        let _ = writeln!(s, "\nlpips_proxy=true");
    }
    s
}

pub fn write_tables(rows: &[AblationRow], out: &Path, table: Table) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv_path = out.join("ablation.csv");
    let md_path = out.join("ablation.md");
    std::fs::write(&csv_path, render_csv(rows)?).map_err(|e| Error::io(&csv_path, e))?;
    std::fs::write(&md_path, render_markdown(rows, table)).map_err(|e| Error::io(&md_path, e))?;
    Ok((csv_path, md_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::VARIANTS;

    fn row(name: &str, alpha: f64, beta: f64) -> AblationRow {
        AblationRow {
            name: name.into(),
            alpha,
            beta,
            is_default: (alpha, beta) == DEFAULT_WEIGHTS,
            params: 10,
            means: MetricMeans {
                psnr_db: 19.76,
                ssim: 0.6359,
                mse: 0.02242,
                lpips: Some(0.3035),
            },
            lpips_proxy: true,
            caption_frozen: true,
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows: Vec<_> = VARIANTS.iter().map(|v| row(v.name, 10.0, 0.1)).collect();
        assert_eq!(parse_csv(&render_csv(&rows).unwrap()).unwrap(), rows);
    }

    #[test]
    fn markdown_uses_display_scaling() {
        let md = render_markdown(&[row("CapHDR2IR", 10.0, 0.1)], Table::Variants);
        assert!(
            md.contains("| CapHDR2IR | ✓ | ✓ | ✓ | ✓ | 10 | 1.976 | 6.359 | 2.242 | 3.035 |"),
            "{md}"
        );
        assert!(md.contains("PSNR ↑ (×10)"));
        let md = render_markdown(&[row("SDR2IR_Baseline", 1.0, 1.0)], Table::Variants);
        assert!(md.contains("| SDR2IR_Baseline | ✗ | - | ✗ | - |"), "{md}");
        let md = render_markdown(&[row("a", 10.0, 0.1), row("b", 1.0, 1.0)], Table::Sweep);
        assert!(
            md.contains("| 10 | 0.1 | 1.976 | 6.359 | 2.242 | 3.035 | default |"),
            "{md}"
        );
    }
}
