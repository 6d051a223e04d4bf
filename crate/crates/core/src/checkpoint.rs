//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.txt     format, config hash, step, seed, optimizer steps,
//!                        caption checksum, then one `tensor` line per file
//! <dir>/config.toml      canonical run config
//! <dir>/tensors/<group>/<name>.pfm
//! ```
//!
//! Each tensor is a gray PFM of width `numel / d0` and height `d0`; the
//! manifest records the full 4-d shape. Groups are `generator`,
//! `discriminator` and the Adam moments `adam_g.m`, `adam_g.v`, `adam_d.m`,
//! `adam_d.v`. Nothing time-dependent is written, so identical runs give
//! identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image_io::{read_pfm_raw, write_pfm_raw, PfmImage};
use crate::nn::{Adam, ParamStore, Tensor};

pub const FORMAT: &str = "caphdr2ir-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub config_hash: String,
    pub step: u64,
    pub seed: u64,
    pub adam_g_t: u64,
    pub adam_d_t: u64,
    pub caption_checksum: Option<String>,
    /// `(group/name, shape)` in file order.
    pub tensors: Vec<(String, [usize; 4])>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format {FORMAT}");
        let _ = writeln!(s, "config_hash {}", self.config_hash);
        let _ = writeln!(s, "step {}", self.step);
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "adam_g_t {}", self.adam_g_t);
        let _ = writeln!(s, "adam_d_t {}", self.adam_d_t);
        let _ = writeln!(
            s,
            "caption_checksum {}",
            self.caption_checksum.as_deref().unwrap_or("-")
        );
        for (name, [a, b, c, d]) in &self.tensors {
            let _ = writeln!(s, "tensor {name} {a} {b} {c} {d}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut fields = BTreeMap::new();
        let mut tensors = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, rest) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("malformed line {line:?}")))?;
            if k == "tensor" {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 5 {
                    return Err(bad(format!("malformed tensor line {line:?}")));
                }
                let mut shape = [0usize; 4];
                for (s, p) in shape.iter_mut().zip(&parts[1..]) {
                    *s = p.parse().map_err(|_| bad(format!("bad dimension in {line:?}")))?;
                }
                tensors.push((parts[0].to_string(), shape));
            } else {
                fields.insert(k.to_string(), rest.to_string());
            }
        }
        let get = |k: &str| fields.get(k).cloned().ok_or_else(|| bad(format!("manifest lacks {k}")));
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| bad(format!("manifest {k} is not a number")))
        };
        if get("format")? != FORMAT {
            return Err(bad(format!("unsupported format {:?}", get("format")?)));
        }
        let cap = get("caption_checksum")?;
        Ok(Manifest {
            config_hash: get("config_hash")?,
            step: num("step")?,
            seed: num("seed")?,
            adam_g_t: num("adam_g_t")?,
            adam_d_t: num("adam_d_t")?,
            caption_checksum: (cap != "-").then_some(cap),
            tensors,
        })
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct CheckpointData {
    pub config: RunConfig,
    pub step: u64,
    pub caption_checksum: Option<String>,
    pub generator: ParamStore<f32>,
    pub discriminator: ParamStore<f32>,
    pub adam_g: Adam<f32>,
    pub adam_d: Adam<f32>,
}

fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("tensors").join(format!("{name}.pfm"))
}

fn write_tensor(dir: &Path, name: &str, t: &Tensor<f32>, list: &mut Vec<(String, [usize; 4])>) -> Result<()> {
    let path = tensor_path(dir, name);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let [d0, ..] = t.shape();
    write_pfm_raw(&path, &PfmImage::gray(t.numel() / d0, d0, t.data().to_vec()))?;
    list.push((name.to_string(), t.shape()));
    Ok(())
}

fn read_tensor(dir: &Path, name: &str, shape: [usize; 4]) -> Result<Tensor<f32>> {
    let pfm = read_pfm_raw(tensor_path(dir, name))?;
    let n: usize = shape.iter().product();
    if pfm.channels != 1 || pfm.data.len() != n || pfm.height != shape[0] {
        return Err(Error::Checkpoint(format!(
            "tensor {name} does not match its manifest shape {shape:?}"
        )));
    }
    Ok(Tensor::from_vec(shape, pfm.data))
}

pub fn save(dir: &Path, data: &CheckpointData) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (group, store) in [("generator", &data.generator), ("discriminator", &data.discriminator)] {
        for (name, entry) in store.iter() {
            write_tensor(dir, &format!("{group}/{name}"), &entry.tensor, &mut tensors)?;
        }
    }
    for (group, adam) in [("adam_g", &data.adam_g), ("adam_d", &data.adam_d)] {
        for (moment, map) in [("m", &adam.m), ("v", &adam.v)] {
            for (name, t) in map {
                write_tensor(dir, &format!("{group}.{moment}/{name}"), t, &mut tensors)?;
            }
        }
    }
    let manifest = Manifest {
        config_hash: data.config.hash(),
        step: data.step,
        seed: data.config.train.seed,
        adam_g_t: data.adam_g.t,
        adam_d_t: data.adam_d.t,
        caption_checksum: data.caption_checksum.clone(),
        tensors,
    };
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, data.config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let man_path = dir.join("manifest.txt");
    std::fs::write(&man_path, manifest.render()).map_err(|e| Error::io(&man_path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::parse(&text)
}

/// Loads a checkpoint. `fresh` supplies freshly initialized stores whose
/// names and shapes every saved tensor must match.
pub fn load(
    dir: &Path,
    fresh_generator: ParamStore<f32>,
    fresh_discriminator: ParamStore<f32>,
) -> Result<CheckpointData> {
    let manifest = read_manifest(dir)?;
    let config = RunConfig::load(&dir.join("config.toml"))?;
    if config.hash() != manifest.config_hash {
        return Err(Error::Checkpoint("config.toml does not match the manifest hash".into()));
    }
    let t = &config.train;
    let mut adam_g = Adam::new(t.lr, t.adam_beta1, t.adam_beta2);
    let mut adam_d = Adam::new(t.lr, t.adam_beta1, t.adam_beta2);
    adam_g.t = manifest.adam_g_t;
    adam_d.t = manifest.adam_d_t;
    let mut generator = fresh_generator;
    let mut discriminator = fresh_discriminator;
    let mut seen = 0usize;
    for (name, shape) in &manifest.tensors {
        let tensor = read_tensor(dir, name, *shape)?;
        let (group, pname) = name
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("tensor name {name:?} lacks a group")))?;
        let target = match group {
            "generator" => Some(&mut generator),
            "discriminator" => Some(&mut discriminator),
            _ => None,
        };
        if let Some(store) = target {
            let slot = store
                .get_mut(pname)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if slot.shape() != *shape {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {shape:?}, model expects {:?}",
                    slot.shape()
                )));
            }
            *slot = tensor;
            seen += 1;
            continue;
        }
        let map = match group {
            "adam_g.m" => &mut adam_g.m,
            "adam_g.v" => &mut adam_g.v,
            "adam_d.m" => &mut adam_d.m,
            "adam_d.v" => &mut adam_d.v,
            _ => return Err(Error::Checkpoint(format!("unknown tensor group {group:?}"))),
        };
        map.insert(pname.to_string(), tensor);
    }
    if seen != generator.len() + discriminator.len() {
        return Err(Error::Checkpoint("checkpoint is missing model tensors".into()));
    }
    Ok(CheckpointData {
        config,
        step: manifest.step,
        caption_checksum: manifest.caption_checksum,
        generator,
        discriminator,
        adam_g,
        adam_d,
    })
}

/// Rebuilds the model a checkpoint was trained with and loads its weights.
pub fn load_model(dir: &Path) -> Result<crate::model::Model> {
    let config = RunConfig::load(&dir.join("config.toml"))?;
    let mut model = crate::model::Model::new(&config)?;
    let data = load(dir, model.generator.params.clone(), model.discriminator.params.clone())?;
    if data.caption_checksum != model.caption_checksum() {
        return Err(Error::Checkpoint("caption backbone differs from the checkpoint".into()));
    }
    model.generator.params = data.generator;
    model.discriminator.params = data.discriminator;
    Ok(model)
}
