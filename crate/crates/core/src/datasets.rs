//! Paired HDR/IR datasets on disk and a procedural synthetic generator.
//!
//! Layout of one split:
//!
//! ```text
//! <root>/<split>/hdr/<id>.hdr          Radiance RGBE
//! <root>/<split>/ir/<id>.png           16-bit grayscale
//! <root>/<split>/emissivity/<id>.pfm   synthetic data only
//! <root>/<split>/meta.csv              id,width,height
//! ```

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_io::{
    decode_radiance, encode_radiance, read_pfm_raw, read_png_ir, read_radiance_hdr, write_pfm_raw, write_png, BitDepth,
    HdrImage, IrImage, PfmImage,
};
use crate::nn::params::fnv1a;
use crate::tonemap::{compress_luminance, luminance, TonemapParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("split must be train or test, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub split: Split,
    pub expected_count: Option<usize>,
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, split: Split) -> Self {
        DatasetSpec {
            root: root.into(),
            split,
            expected_count: None,
        }
    }

    pub fn dir(&self) -> PathBuf {
        self.root.join(self.split.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct PairedSample {
    pub id: String,
    pub hdr: HdrImage,
    pub ir: IrImage,
}

fn stems(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Loads every pair in a split, sorted by id.
pub fn load_split(spec: &DatasetSpec) -> Result<Vec<PairedSample>> {
    let dir = spec.dir();
    let hdrs = stems(&dir.join("hdr"), "hdr")?;
    let irs = stems(&dir.join("ir"), "png")?;
    if let Some(id) = hdrs.keys().find(|k| !irs.contains_key(*k)) {
        return Err(Error::OrphanFile {
            id: id.clone(),
            kind: "hdr",
        });
    }
    if let Some(id) = irs.keys().find(|k| !hdrs.contains_key(*k)) {
        return Err(Error::OrphanFile {
            id: id.clone(),
            kind: "ir",
        });
    }
    if hdrs.is_empty() {
        return Err(Error::EmptyDataset(dir));
    }
    let mut out = Vec::with_capacity(hdrs.len());
    for (id, hpath) in hdrs {
        let hdr = read_radiance_hdr(&hpath)?;
        let ir = read_png_ir(&irs[&id])?;
        if (hdr.width(), hdr.height()) != (ir.width(), ir.height()) {
            return Err(Error::PairDimMismatch {
                id,
                hdr: (hdr.width(), hdr.height()),
                ir: (ir.width(), ir.height()),
            });
        }
        out.push(PairedSample { id, hdr, ir });
    }
    if let Some(n) = spec.expected_count {
        if n != out.len() {
            return Err(Error::Config(format!(
                "expected {n} pairs in {}, found {}",
                dir.display(),
                out.len()
            )));
        }
    }
    Ok(out)
}

/// Minimum max/min luminance ratio of every synthetic scene.
pub const MIN_DYNAMIC_RANGE: f64 = 1e4;

/// Seed of one synthetic sample.
pub fn sample_seed(seed: u64, split: Split, id: &str) -> u64 {
    fnv1a(format!("{seed}/{}/{id}", split.as_str()).as_bytes())
}

/// Sum of random plane waves scaled into `[-1, 1]`.
struct SmoothField {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, n: usize, max_cycles: f64) -> Self {
        let waves = (0..n)
            .map(|_| {
                let theta = rng.random::<f64>() * TAU;
                let f = 0.5 + rng.random::<f64>() * (max_cycles - 0.5);
                (
                    f * theta.cos(),
                    f * theta.sin(),
                    rng.random::<f64>() * TAU,
                    0.5 + rng.random::<f64>(),
                )
            })
            .collect();
        SmoothField { waves }
    }

    /// `u, v` in `[0, 1)`.
    fn at(&self, u: f64, v: f64) -> f64 {
        let total: f64 = self.waves.iter().map(|w| w.3).sum();
        let s: f64 = self
            .waves
            .iter()
            .map(|&(fx, fy, ph, a)| a * (TAU * (fx * u + fy * v) + ph).cos())
            .sum();
        s / total
    }
}

/// Chromaticity carrying the emissivity, normalized to unit luminance.
pub fn emissivity_chroma(e: f64) -> [f64; 3] {
    let c = [0.25 + 0.75 * e, 0.55, 1.05 - 0.75 * e];
    let l = 0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2];
    c.map(|v| v / l)
}

/// Ground-truth IR for a stored HDR image and its emissivity map:
/// `e * tonemapped luminance`.
pub fn synthetic_ir(hdr: &HdrImage, emissivity: &[f32], params: &TonemapParams) -> Result<IrImage> {
    if emissivity.len() != hdr.width() * hdr.height() {
        return Err(Error::ShapeMismatch("emissivity map does not match the image".into()));
    }
    let ld = compress_luminance(&luminance(hdr), params)?;
    let data = ld
        .iter()
        .zip(emissivity)
        .map(|(&l, &e)| (l * e as f64) as f32)
        .collect();
    IrImage::new(hdr.width(), hdr.height(), data)
}

/// One scene: `(hdr, emissivity)`. The HDR is already quantized through
/// RGBE so the returned image equals what a reader sees on disk.
pub fn synthetic_scene(size: usize, seed: u64) -> Result<(HdrImage, Vec<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = SmoothField::new(&mut rng, 4, 2.0);
    let emis = SmoothField::new(&mut rng, 3, 1.5);
    let n_sources = 1 + rng.random_range(0..3);
    let sources: Vec<(f64, f64, f64)> = (0..n_sources)
        .map(|_| {
            (
                0.15 + 0.7 * rng.random::<f64>(),
                0.15 + 0.7 * rng.random::<f64>(),
                0.03 + 0.05 * rng.random::<f64>(),
            )
        })
        .collect();
    let px = |i: usize| (i as f64 + 0.5) / size as f64;
    // log10 luminance of the background spans about [-2.5, 0.5]
    let mut log_l = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            log_l[y * size + x] = -1.0 + 1.5 * base.at(px(x), px(y));
        }
    }
    let floor = log_l.iter().cloned().fold(f64::INFINITY, f64::min);
    // Every source peaks 4.5 decades above the darkest background pixel.
    let lift = floor + 4.5;
    let mut lum = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let mut l = 10f64.powf(log_l[i]);
            for &(cx, cy, r) in &sources {
                let d2 = (px(x) - cx).powi(2) + (px(y) - cy).powi(2);
                l += 10f64.powf(lift) * (-d2 / (2.0 * r * r)).exp();
            }
            lum[i] = l;
        }
    }
    let e: Vec<f32> = (0..size * size)
        .map(|i| {
            let (x, y) = (i % size, i / size);
            (0.3 + 0.7 * (0.5 + 0.5 * emis.at(px(x), px(y)))) as f32
        })
        .collect();
    let mut data = Vec::with_capacity(size * size * 3);
    for (l, &ev) in lum.iter().zip(&e) {
        data.extend(emissivity_chroma(ev as f64).map(|c| (c * l) as f32));
    }
    let hdr = decode_radiance(&encode_radiance(&HdrImage::new(size, size, data)?))?;
    Ok((hdr, e))
}

pub fn dynamic_range(hdr: &HdrImage) -> f64 {
    let l = luminance(hdr);
    let max = l.iter().cloned().fold(0.0, f64::max);
    let min = l.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Writes `count` synthetic pairs of `size x size` into `<out_dir>/<split>`.
pub fn generate_synthetic(
    count: usize,
    size: usize,
    seed: u64,
    out_dir: &Path,
    split: Split,
    params: &TonemapParams,
) -> Result<DatasetSpec> {
    if size == 0 || count == 0 {
        return Err(Error::Config("synthetic dataset needs count and size > 0".into()));
    }
    let spec = DatasetSpec {
        root: out_dir.to_path_buf(),
        split,
        expected_count: Some(count),
    };
    let dir = spec.dir();
    for sub in ["hdr", "ir", "emissivity"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut meta = csv::Writer::from_writer(Vec::new());
    meta.write_record(["id", "width", "height"])?;
    for i in 0..count {
        let id = format!("{}_{i:04}", split.as_str());
        let (hdr, e) = synthetic_scene(size, sample_seed(seed, split, &id))?;
        let dr = dynamic_range(&hdr);
        if dr < MIN_DYNAMIC_RANGE {
            return Err(Error::InvalidImage(format!(
                "synthetic scene {id} spans only {dr:.1}:1"
            )));
        }
        let ir = synthetic_ir(&hdr, &e, params)?;
        let hp = dir.join("hdr").join(format!("{id}.hdr"));
        std::fs::write(&hp, encode_radiance(&hdr)).map_err(|err| Error::io(&hp, err))?;
        write_png(dir.join("ir").join(format!("{id}.png")), &ir, BitDepth::Sixteen)?;
        write_pfm_raw(
            dir.join("emissivity").join(format!("{id}.pfm")),
            &PfmImage::gray(size, size, e),
        )?;
        meta.write_record([id, size.to_string(), size.to_string()])?;
    }
    let bytes = meta
        .into_inner()
        .map_err(|e| Error::io(dir.join("meta.csv"), e.into_error()))?;
    let mp = dir.join("meta.csv");
    std::fs::write(&mp, bytes).map_err(|e| Error::io(&mp, e))?;
    Ok(spec)
}

/// Emissivity sidecar of a synthetic sample.
pub fn load_emissivity(spec: &DatasetSpec, id: &str) -> Result<Vec<f32>> {
    Ok(read_pfm_raw(spec.dir().join("emissivity").join(format!("{id}.pfm")))?.data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_span_four_decades() {
        for s in 0..20 {
            let (hdr, e) = synthetic_scene(32, s).unwrap();
            assert!(dynamic_range(&hdr) >= MIN_DYNAMIC_RANGE, "seed {s}");
            assert!(e.iter().all(|&v| (0.3..=1.0).contains(&v)));
        }
    }

    #[test]
    fn chroma_has_unit_luminance() {
        for e in [0.3, 0.5, 1.0] {
            let c = emissivity_chroma(e);
            assert!((0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2] - 1.0).abs() < 1e-12);
            assert!(c.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn generated_split_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = TonemapParams::default();
        let spec = generate_synthetic(3, 32, 7, dir.path(), Split::Train, &p).unwrap();
        let samples = load_split(&spec).unwrap();
        let ids: Vec<_> = samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["train_0000", "train_0001", "train_0002"]);
        for s in &samples {
            assert_eq!((s.hdr.width(), s.ir.height()), (32, 32));
            assert!(s.ir.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            // the IR target is reproducible from the stored HDR and sidecar
            let e = load_emissivity(&spec, &s.id).unwrap();
            let again = synthetic_ir(&s.hdr, &e, &p).unwrap();
            for (&a, &b) in again.data().iter().zip(s.ir.data()) {
                assert_eq!(BitDepth::Sixteen.quantize(a), BitDepth::Sixteen.quantize(b));
            }
        }
        let meta = std::fs::read_to_string(spec.dir().join("meta.csv")).unwrap();
        assert_eq!(meta.lines().next(), Some("id,width,height"));
        assert_eq!(meta.lines().count(), 4);
    }

    #[test]
    fn generation_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let p = TonemapParams::default();
        for d in [&a, &b] {
            generate_synthetic(2, 16, 3, d.path(), Split::Test, &p).unwrap();
        }
        for sub in [
            "hdr/test_0001.hdr",
            "ir/test_0000.png",
            "emissivity/test_0001.pfm",
            "meta.csv",
        ] {
            let x = std::fs::read(a.path().join("test").join(sub)).unwrap();
            let y = std::fs::read(b.path().join("test").join(sub)).unwrap();
            assert_eq!(x, y, "{sub}");
        }
    }

    #[test]
    fn orphans_and_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let p = TonemapParams::default();
        let spec = generate_synthetic(2, 16, 1, dir.path(), Split::Train, &p).unwrap();
        let extra = IrImage::new(16, 16, vec![0.5; 256]).unwrap();
        let orphan = spec.dir().join("ir/zz.png");
        write_png(&orphan, &extra, BitDepth::Sixteen).unwrap();
        match load_split(&spec) {
            Err(Error::OrphanFile { id, kind }) => assert_eq!((id.as_str(), kind), ("zz", "ir")),
            other => panic!("{other:?}"),
        }
        std::fs::remove_file(&orphan).unwrap();
        let small = IrImage::new(8, 8, vec![0.5; 64]).unwrap();
        write_png(spec.dir().join("ir/train_0001.png"), &small, BitDepth::Sixteen).unwrap();
        assert!(matches!(load_split(&spec), Err(Error::PairDimMismatch { .. })));
        let empty = DatasetSpec::new(dir.path(), Split::Test);
        assert!(matches!(load_split(&empty), Err(Error::EmptyDataset(_))));
    }
}
