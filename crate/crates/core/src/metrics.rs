//! Image-quality metrics and the evaluation report.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image_io::{read_png_ir, IrImage};
use crate::losses::FeatureExtractor;
use crate::nn::{Graph, Tensor};

fn check_shape(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} vs {} values", a.len(), b.len())));
    }
    Ok(())
}

/// Mean squared difference over every value.
pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    check_shape(a, b)?;
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// `10 log10(peak^2 / mse)`; `+inf` for identical inputs.
pub fn psnr(a: &[f32], b: &[f32], peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter, valid region only.
fn filter(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for xx in 0..ow {
            tmp[y * ow + xx] = (0..n).map(|i| k[i] * x[y * w + xx + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for xx in 0..ow {
            out[y * ow + xx] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + xx]).sum();
        }
    }
    out
}

/// Mean local SSIM of two single-channel images in `[0, 1]`.
pub fn ssim(a: &[f32], b: &[f32], width: usize, height: usize) -> Result<f64> {
    check_shape(a, b)?;
    if a.len() != width * height {
        return Err(Error::ShapeMismatch(format!("{} values for {width}x{height}", a.len())));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!(
            "{width}x{height} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let k = gaussian_window();
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|v| filter(v, width, height, &k));
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let mut sum = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(sum / mx.len() as f64)
}

/// Deep-feature distance with unit-normalized channels, averaged spatially
/// and summed over taps. Uses a frozen random extractor unless pretrained
/// weights are supplied, in which case `proxy` is false.
#[derive(Clone, Debug)]
pub struct Lpips {
    extractor: FeatureExtractor<f64>,
    taps: Vec<usize>,
    pub proxy: bool,
}

pub const LPIPS_PROXY_SEED: u64 = 0x1915;

impl Lpips {
    pub fn proxy() -> Self {
        Lpips {
            extractor: FeatureExtractor::frozen_random([8, 16, 32], LPIPS_PROXY_SEED, "lpips"),
            taps: vec![2, 4, 6],
            proxy: true,
        }
    }

    pub fn pretrained(dir: &Path) -> Result<Self> {
        Ok(Lpips {
            extractor: FeatureExtractor::pretrained(dir, "lpips")?,
            taps: vec![2, 4, 6],
            proxy: false,
        })
    }

    pub fn distance(&self, a: &[f32], b: &[f32], width: usize, height: usize) -> Result<f64> {
        check_shape(a, b)?;
        if a.len() != width * height {
            return Err(Error::ShapeMismatch(format!("{} values for {width}x{height}", a.len())));
        }
        let mut g = Graph::<f64>::new(false);
        let to = |v: &[f32]| Tensor::from_vec([1, 1, height, width], v.iter().map(|&x| x as f64).collect());
        let xa = g.constant(to(a));
        let xb = g.constant(to(b));
        let fa = self.extractor.features(&mut g, xa, &self.taps);
        let fb = self.extractor.features(&mut g, xb, &self.taps);
        let mut total = 0.0;
        for (va, vb) in fa.into_iter().zip(fb) {
            total += normalized_distance(g.value(va), g.value(vb));
        }
        Ok(total)
    }
}

/// Mean over pixels of `||u_a - u_b||^2` where `u` is the channel vector
/// scaled to unit length.
pub(crate) fn normalized_distance(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let [_, c, h, w] = a.shape();
    let hw = h * w;
    let (da, db) = (a.data(), b.data());
    let mut sum = 0.0;
    for p in 0..hw {
        let na = (0..c).map(|k| da[k * hw + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
        let nb = (0..c).map(|k| db[k * hw + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
        sum += (0..c)
            .map(|k| (da[k * hw + p] / na - db[k * hw + p] / nb).powi(2))
            .sum::<f64>();
    }
    sum / hw as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
    pub lpips: Option<f64>,
}

/// Raw means of the four metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricMeans {
    /// Mean over rows with finite PSNR; `+inf` when every row is identical.
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
    pub lpips: Option<f64>,
}

/// Display multipliers for the report table, applied to raw means.
pub const PSNR_DISPLAY: f64 = 0.1;
pub const SSIM_DISPLAY: f64 = 10.0;
pub const MSE_DISPLAY: f64 = 100.0;
pub const LPIPS_DISPLAY: f64 = 10.0;

pub const TABLE_HEADERS: [&str; 4] = ["PSNR ↑ (×10)", "SSIM ↑ (×0.1)", "MSE ↓ (×0.1)", "LPIPS ↓ (×0.1)"];

impl MetricMeans {
    /// `(psnr, ssim, mse, lpips)` under the display multipliers.
    pub fn display(&self) -> (f64, f64, f64, Option<f64>) {
        (
            self.psnr_db * PSNR_DISPLAY,
            self.ssim * SSIM_DISPLAY,
            self.mse * MSE_DISPLAY,
            self.lpips.map(|v| v * LPIPS_DISPLAY),
        )
    }

    /// Table cells, three decimals, infinite PSNR rendered as `inf`.
    pub fn display_cells(&self) -> [String; 4] {
        let (p, s, m, l) = self.display();
        let fmt = |v: f64| {
            if v.is_infinite() {
                "inf".to_string()
            } else {
                format!("{v:.3}")
            }
        };
        [fmt(p), fmt(s), fmt(m), l.map(fmt).unwrap_or_else(|| "n/a".into())]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub means: MetricMeans,
    /// Rows with infinite PSNR, left out of the PSNR mean.
    pub psnr_excluded: usize,
    pub lpips_proxy: bool,
    /// Ground-truth ids with no prediction (only with `allow_partial`).
    pub missing: Vec<String>,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>, lpips_proxy: bool) -> Self {
        let n = rows.len().max(1) as f64;
        let finite: Vec<f64> = rows.iter().map(|r| r.psnr_db).filter(|p| p.is_finite()).collect();
        let psnr_db = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let lpips = if rows.iter().all(|r| r.lpips.is_some()) && !rows.is_empty() {
            Some(rows.iter().map(|r| r.lpips.unwrap()).sum::<f64>() / n)
        } else {
            None
        };
        let means = MetricMeans {
            psnr_db,
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            mse: rows.iter().map(|r| r.mse).sum::<f64>() / n,
            lpips,
        };
        MetricReport {
            psnr_excluded: rows.len() - finite.len(),
            rows,
            means,
            lpips_proxy,
            missing: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "psnr_db", "ssim", "mse", "lpips", "lpips_proxy"])?;
        let f = |v: f64| format!("{v}");
        for r in &self.rows {
            w.write_record([
                r.id.clone(),
                f(r.psnr_db),
                f(r.ssim),
                f(r.mse),
                r.lpips.map(f).unwrap_or_default(),
                self.lpips_proxy.to_string(),
            ])?;
        }
        let m = &self.means;
        w.write_record([
            "mean".to_string(),
            f(m.psnr_db),
            f(m.ssim),
            f(m.mse),
            m.lpips.map(f).unwrap_or_default(),
            self.lpips_proxy.to_string(),
        ])?;
        let bytes = w.into_inner().map_err(|e| Error::Io {
            path: PathBuf::from("report.csv"),
            source: e.into_error(),
        })?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn to_markdown(&self, label: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| Method | {} |", TABLE_HEADERS.join(" | "));
        let _ = writeln!(s, "|---|---|---|---|---|");
        let _ = writeln!(s, "{}", table_row(label, &self.means));
        let _ = writeln!(s);
        let _ = writeln!(s, "images: {}", self.rows.len());
        if self.psnr_excluded > 0 {
            let _ = writeln!(
                s,
                "psnr: {} identical image(s) excluded from the mean",
                self.psnr_excluded
            );
        }
        if !self.missing.is_empty() {
            let _ = writeln!(s, "missing predictions: {}", self.missing.join(", "));
        }
        let _ = writeln!(s, "lpips_proxy={}", self.lpips_proxy);
        s
    }
}

/// One markdown table row under the display multipliers.
pub fn table_row(label: &str, means: &MetricMeans) -> String {
    format!("| {label} | {} |", means.display_cells().join(" | "))
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub allow_partial: bool,
    pub quantize_8bit: bool,
    /// `None` skips LPIPS.
    pub lpips: Option<LpipsBackend>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LpipsBackend {
    Proxy,
    Pretrained(PathBuf),
}

fn png_ids(dir: &Path) -> Result<BTreeSet<String>> {
    let mut ids = BTreeSet::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids)
}

fn quantize(img: &IrImage) -> Vec<f32> {
    img.data().iter().map(|&v| (v * 255.0).round() / 255.0).collect()
}

/// Compares `<id>.png` files in two directories. Every ground-truth id needs
/// a prediction unless `allow_partial`; predictions without ground truth are
/// always an error.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, opts: &EvalOptions) -> Result<MetricReport> {
    let pred_ids = png_ids(pred_dir)?;
    let gt_ids = png_ids(gt_dir)?;
    let extra: Vec<String> = pred_ids.difference(&gt_ids).cloned().collect();
    let missing: Vec<String> = gt_ids.difference(&pred_ids).cloned().collect();
    if !extra.is_empty() || (!missing.is_empty() && !opts.allow_partial) {
        let mut all = missing.clone();
        all.extend(extra);
        return Err(Error::UnmatchedIds(all));
    }
    let lpips = match &opts.lpips {
        None => None,
        Some(LpipsBackend::Proxy) => Some(Lpips::proxy()),
        Some(LpipsBackend::Pretrained(dir)) => Some(Lpips::pretrained(dir)?),
    };
    let mut rows = Vec::new();
    for id in pred_ids.intersection(&gt_ids) {
        let p = read_png_ir(pred_dir.join(format!("{id}.png")))?;
        let t = read_png_ir(gt_dir.join(format!("{id}.png")))?;
        if (p.width(), p.height()) != (t.width(), t.height()) {
            return Err(Error::ShapeMismatch(format!(
                "{id}: prediction {}x{} vs ground truth {}x{}",
                p.width(),
                p.height(),
                t.width(),
                t.height()
            )));
        }
        let (pv, tv) = if opts.quantize_8bit {
            (quantize(&p), quantize(&t))
        } else {
            (p.data().to_vec(), t.data().to_vec())
        };
        let (w, h) = (p.width(), p.height());
        let m = mse(&pv, &tv)?;
        rows.push(MetricRow {
            id: id.clone(),
            psnr_db: psnr_from_mse(m, 1.0),
            ssim: ssim(&pv, &tv, w, h)?,
            mse: m,
            lpips: lpips.as_ref().map(|l| l.distance(&pv, &tv, w, h)).transpose()?,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(gt_dir.to_path_buf()));
    }
    let mut report = MetricReport::from_rows(rows, lpips.as_ref().is_some_and(|l| l.proxy));
    report.missing = missing;
    Ok(report)
}

/// Writes `report.csv` and `report.md` into `out_dir`.
pub fn write_report(report: &MetricReport, out_dir: &Path, label: &str) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("report.csv");
    let md_path = out_dir.join("report.md");
    std::fs::write(&csv_path, report.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
    std::fs::write(&md_path, report.to_markdown(label)).map_err(|e| Error::io(&md_path, e))?;
    Ok((csv_path, md_path))
}
