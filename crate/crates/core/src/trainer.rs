//! Alternating discriminator/generator optimization.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, CheckpointData};
use crate::config::RunConfig;
use crate::datasets::PairedSample;
use crate::error::{Error, Result};
use crate::inputs::gray_tensor;
use crate::losses::PerceptualLoss;
use crate::metrics::psnr_from_mse;
use crate::model::{component_seed, Model, PreparedInput};
use crate::nn::{Adam, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps; 0 writes only
    /// the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 200,
            lr: 4e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "train.lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        for (k, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{k} must be in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// Scalars logged after one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub per_loss: f64,
    pub g_loss: f64,
    pub d_loss: f64,
    pub total: f64,
}

pub const LOG_HEADER: &str = "step,per_loss,g_loss,d_loss,total";

impl StepLog {
    /// Shortest round-trip formatting, so identical runs give identical bytes.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?}",
            self.step, self.per_loss, self.g_loss, self.d_loss, self.total
        )
    }
}

pub fn render_log(rows: &[StepLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

pub fn parse_log(text: &str) -> Result<Vec<StepLog>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Checkpoint("training log has an unexpected header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| f.get(i).and_then(|v| v.parse::<f64>().ok());
            match (f.first().and_then(|v| v.parse().ok()), num(1), num(2), num(3), num(4)) {
                (Some(step), Some(per_loss), Some(g_loss), Some(d_loss), Some(total)) => Ok(StepLog {
                    step,
                    per_loss,
                    g_loss,
                    d_loss,
                    total,
                }),
                _ => Err(Error::Checkpoint(format!("malformed log line {l:?}"))),
            }
        })
        .collect()
}

/// Inputs and targets of a training set, prepared once.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub ids: Vec<String>,
    pub inputs: Vec<PreparedInput>,
    /// `[1, 1, h, w]` each.
    pub targets: Vec<Tensor<f32>>,
}

impl PreparedSet {
    pub fn new(model: &Model, samples: &[PairedSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset(PathBuf::new()));
        }
        let mut set = PreparedSet {
            ids: Vec::new(),
            inputs: Vec::new(),
            targets: Vec::new(),
        };
        let (w0, h0) = (samples[0].hdr.width(), samples[0].hdr.height());
        for s in samples {
            model.check_target(&s.ir, &s.hdr, &s.id)?;
            if (s.hdr.width(), s.hdr.height()) != (w0, h0) {
                return Err(Error::ShapeMismatch(format!(
                    "{} is {}x{}, batches need every image at {w0}x{h0}",
                    s.id,
                    s.hdr.width(),
                    s.hdr.height()
                )));
            }
            set.ids.push(s.id.clone());
            set.inputs.push(model.prepare(&s.hdr, &s.id)?);
            set.targets.push(gray_tensor(s.ir.width(), s.ir.height(), s.ir.data()));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Mean PSNR of evaluation-mode predictions against the targets.
    pub fn mean_psnr(&self, model: &Model) -> Result<f64> {
        let mut sum = 0.0;
        for (p, t) in self.inputs.iter().zip(&self.targets) {
            let y = model.infer_prepared(p)?;
            let m = crate::metrics::mse(y.data(), t.data())?;
            sum += psnr_from_mse(m, 1.0);
        }
        Ok(sum / self.len() as f64)
    }
}

pub struct Trainer {
    pub model: Model,
    pub perceptual: PerceptualLoss<f32>,
    pub adam_g: Adam<f32>,
    pub adam_d: Adam<f32>,
    pub step: u64,
    pub data: PreparedSet,
    pub log: Vec<StepLog>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, samples: &[PairedSample]) -> Result<Self> {
        let model = Model::new(cfg)?;
        Self::from_model(model, samples)
    }

    pub fn from_model(model: Model, samples: &[PairedSample]) -> Result<Self> {
        let data = PreparedSet::new(&model, samples)?;
        let t = &model.cfg.train;
        Ok(Trainer {
            perceptual: PerceptualLoss::new(&model.cfg.perceptual_config())?,
            adam_g: Adam::new(t.lr, t.adam_beta1, t.adam_beta2),
            adam_d: Adam::new(t.lr, t.adam_beta1, t.adam_beta2),
            step: 0,
            log: Vec::new(),
            data,
            model,
        })
    }

    /// Continues from a checkpoint directory, keeping the log rows up to its step.
    pub fn resume(ckpt: &Path, samples: &[PairedSample], log: Vec<StepLog>) -> Result<Self> {
        let manifest_cfg = RunConfig::load(&ckpt.join("config.toml"))?;
        let mut model = Model::new(&manifest_cfg)?;
        let data = checkpoint::load(ckpt, model.generator.params.clone(), model.discriminator.params.clone())?;
        if data.caption_checksum != model.caption_checksum() {
            return Err(Error::Checkpoint("caption backbone differs from the checkpoint".into()));
        }
        model.generator.params = data.generator;
        model.discriminator.params = data.discriminator;
        let mut t = Self::from_model(model, samples)?;
        t.adam_g = data.adam_g;
        t.adam_d = data.adam_d;
        t.step = data.step;
        t.log = log.into_iter().filter(|r| r.step <= data.step).collect();
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.model.cfg.train.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.model.cfg.train.epochs as u64
    }

    /// Sample indices of the batch at 0-based `step`. Each epoch is a fresh
    /// permutation derived from the run seed and the epoch number only.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, k) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let seed = component_seed(self.model.cfg.train.seed, &format!("shuffle/{epoch}"));
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = self.model.cfg.train.batch_size;
        order[k * b..((k + 1) * b).min(order.len())].to_vec()
    }

    fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Option<Vec<Tensor<f32>>>, Tensor<f32>) {
        let x = Tensor::stack(&idx.iter().map(|&i| &self.data.inputs[i].x).collect::<Vec<_>>());
        let y = Tensor::stack(&idx.iter().map(|&i| &self.data.targets[i]).collect::<Vec<_>>());
        let caps = self.data.inputs[idx[0]].captions.as_ref().map(|levels| {
            (0..levels.len())
                .map(|l| {
                    let items: Vec<&Tensor<f32>> = idx
                        .iter()
                        .map(|&i| &self.data.inputs[i].captions.as_ref().expect("uniform captions")[l])
                        .collect();
                    Tensor::stack(&items)
                })
                .collect()
        });
        (x, caps, y)
    }

    fn finite(&self, term: &'static str, v: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteLoss {
                term,
                step: self.step + 1,
                value: v,
            })
        }
    }

    /// One discriminator update then one generator update.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let idx = self.batch_indices(self.step);
        let (x, caps, target) = self.batch(&idx);
        let cfg = &self.model.cfg;
        let variant = cfg.gan_variant;
        let w = cfg.loss;

        let mut g = Graph::<f32>::new(true);
        let xv = g.constant(x);
        let cv: Option<Vec<Var>> = caps.map(|c| c.into_iter().map(|t| g.constant(t)).collect());
        let gen = &self.model.generator;
        let out = gen.forward(&mut g, &gen.params.bind(true), xv, cv.as_deref())?;
        let fake = g.value(out.output).clone();

        // Discriminator on the detached prediction.
        let mut gd = Graph::<f32>::new(true);
        let real = gd.constant(target.clone());
        let fake_c = gd.constant(fake);
        let disc = &self.model.discriminator;
        let lr = disc.forward(&mut gd, real, true);
        let lf = disc.forward(&mut gd, fake_c, true);
        let d_loss = variant.d_loss(&mut gd, lr, lf);
        let d_val = self.finite("d_loss", gd.scalar(d_loss) as f64)?;
        gd.backward(d_loss);
        let d_grads = gd.param_grads(&self.model.discriminator.params);
        self.adam_d.step(&mut self.model.discriminator.params, &d_grads);

        // Generator against the updated, frozen discriminator.
        let t = g.constant(target);
        let per = self.perceptual.forward(&mut g, out.output, t)?;
        let logits = self.model.discriminator.forward(&mut g, out.output, false);
        let gan = variant.g_loss(&mut g, logits);
        let per_val = self.finite("perceptual", g.scalar(per) as f64)?;
        let g_val = self.finite("gan", g.scalar(gan) as f64)?;
        let a = g.scale(per, w.alpha as f32);
        let b = g.scale(gan, w.beta as f32);
        let total = g.add(a, b);
        let total_val = self.finite("total", g.scalar(total) as f64)?;
        g.backward(total);
        let g_grads = g.param_grads(&self.model.generator.params);
        let updates = g.take_updates();
        self.adam_g.step(&mut self.model.generator.params, &g_grads);
        self.model.generator.params.apply_updates(updates);

        self.step += 1;
        let row = StepLog {
            step: self.step,
            per_loss: per_val,
            g_loss: g_val,
            d_loss: d_val,
            total: total_val,
        };
        self.log.push(row);
        Ok(row)
    }

    pub fn checkpoint_data(&self) -> CheckpointData {
        CheckpointData {
            config: self.model.cfg.clone(),
            step: self.step,
            caption_checksum: self.model.caption_checksum(),
            generator: self.model.generator.params.clone(),
            discriminator: self.model.discriminator.params.clone(),
            adam_g: self.adam_g.clone(),
            adam_d: self.adam_d.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, &self.checkpoint_data())
    }

    /// Runs to `total_steps`, writing `<out>/log.csv`, intermediate
    /// checkpoints `<out>/checkpoints/step_<k>` and the final `<out>/checkpoint`.
    /// `on_step` sees every logged row.
    pub fn fit(&mut self, out: &Path, mut on_step: impl FnMut(&Trainer, &StepLog)) -> Result<PathBuf> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let every = self.model.cfg.train.checkpoint_every;
        let total = self.total_steps();
        while self.step < total {
            let row = self.train_step()?;
            on_step(self, &row);
            if every > 0 && self.step.is_multiple_of(every) && self.step < total {
                self.save(&out.join("checkpoints").join(format!("step_{:08}", self.step)))?;
                write_log(out, &self.log)?;
            }
        }
        let final_dir = out.join("checkpoint");
        self.save(&final_dir)?;
        write_log(out, &self.log)?;
        Ok(final_dir)
    }
}

pub fn write_log(out: &Path, rows: &[StepLog]) -> Result<PathBuf> {
    let path = out.join("log.csv");
    std::fs::write(&path, render_log(rows)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Trains from scratch on `samples`; returns the final checkpoint directory.
pub fn fit(cfg: &RunConfig, samples: &[PairedSample], out: &Path) -> Result<PathBuf> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset(out.to_path_buf()));
    }
    Trainer::new(cfg, samples)?.fit(out, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synthetic_ir;
    use crate::datasets::synthetic_scene;
    use crate::tonemap::TonemapParams;

    pub(crate) fn tiny_cfg() -> RunConfig {
        let mut c = RunConfig::default();
        c.scales = 2;
        c.channels = vec![4, 8];
        c.disc_channels = 2;
        c.perceptual_taps = vec![2];
        c.perceptual_weights = vec![1.0];
        c.train.batch_size = 2;
        c.train.epochs = 2;
        c.train.lr = 1e-3;
        c
    }

    fn samples(n: usize) -> Vec<PairedSample> {
        (0..n)
            .map(|i| {
                let (hdr, e) = synthetic_scene(16, i as u64).unwrap();
                let ir = synthetic_ir(&hdr, &e, &TonemapParams::default()).unwrap();
                PairedSample {
                    id: format!("s{i}"),
                    hdr,
                    ir,
                }
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        let mut t = TrainConfig::default();
        t.adam_beta2 = 1.0;
        assert!(t.validate().is_err());
        t = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(t.validate().is_err());
    }

    #[test]
    fn shuffles_cover_each_epoch() {
        let t = Trainer::new(&tiny_cfg(), &samples(5)).unwrap();
        assert_eq!(t.steps_per_epoch(), 3);
        assert_eq!(t.total_steps(), 6);
        for epoch in 0..2 {
            let mut all: Vec<usize> = (0..3).flat_map(|k| t.batch_indices(epoch * 3 + k)).collect();
            all.sort();
            assert_eq!(all, vec![0, 1, 2, 3, 4]);
        }
        assert_ne!(t.batch_indices(0), t.batch_indices(3));
    }

    #[test]
    fn two_runs_log_identically() {
        let data = samples(3);
        let run = || {
            let mut t = Trainer::new(&tiny_cfg(), &data).unwrap();
            (0..3).map(|_| t.train_step().unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_lr_keeps_trainable_parameters() {
        let mut cfg = tiny_cfg();
        cfg.train.lr = 0.0;
        let mut t = Trainer::new(&cfg, &samples(2)).unwrap();
        let before = t.model.generator.params.clone();
        let dbefore = t.model.discriminator.params.clone();
        for _ in 0..3 {
            t.train_step().unwrap();
        }
        for name in before.trainable_names() {
            assert_eq!(before.get(&name), t.model.generator.params.get(&name), "{name}");
        }
        assert_eq!(dbefore.checksum(), t.model.discriminator.params.checksum());
    }

    #[test]
    fn zero_beta_decouples_the_discriminator() {
        let mut cfg = tiny_cfg();
        cfg.loss.beta = 0.0;
        let data = samples(2);
        let mut a = Trainer::new(&cfg, &data).unwrap();
        let mut b = Trainer::new(&cfg, &data).unwrap();
        b.model.discriminator = crate::losses::Discriminator::new(cfg.disc_channels, 999);
        for _ in 0..3 {
            a.train_step().unwrap();
            b.train_step().unwrap();
        }
        assert_eq!(a.model.generator.params.checksum(), b.model.generator.params.checksum());
    }

    #[test]
    fn every_generator_parameter_gets_a_gradient() {
        let cfg = tiny_cfg();
        let t = Trainer::new(&cfg, &samples(2)).unwrap();
        let (x, caps, target) = t.batch(&[0, 1]);
        let mut g = Graph::<f32>::new(true);
        let xv = g.constant(x);
        let cv: Option<Vec<Var>> = caps.map(|c| c.into_iter().map(|t| g.constant(t)).collect());
        let gen = &t.model.generator;
        let out = gen.forward(&mut g, &gen.params.bind(true), xv, cv.as_deref()).unwrap();
        let tv = g.constant(target);
        let per = t.perceptual.forward(&mut g, out.output, tv).unwrap();
        let logits = t.model.discriminator.forward(&mut g, out.output, false);
        let gan = cfg.gan_variant.g_loss(&mut g, logits);
        let a = g.scale(per, 10.0);
        let b = g.scale(gan, 0.1);
        let total = g.add(a, b);
        g.backward(total);
        for name in gen.params.trainable_names() {
            assert!(g.has_grad(&gen.params, &name), "{name} has no gradient");
        }
    }

    #[test]
    fn non_finite_loss_names_the_term() {
        let mut t = Trainer::new(&tiny_cfg(), &samples(2)).unwrap();
        t.model.discriminator.params.get_mut("logit.bias").unwrap().data_mut()[0] = f32::NAN;
        match t.train_step() {
            Err(Error::NonFiniteLoss { term, step, .. }) => assert_eq!((term, step), ("d_loss", 1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resume_matches_unbroken_run() {
        let dir = tempfile::tempdir().unwrap();
        let data = samples(3);
        let mut cfg = tiny_cfg();
        cfg.train.checkpoint_every = 2;
        let mut full = Trainer::new(&cfg, &data).unwrap();
        full.fit(&dir.path().join("a"), |_, _| {}).unwrap();
        let log = parse_log(&std::fs::read_to_string(dir.path().join("a/log.csv")).unwrap()).unwrap();
        assert_eq!(log, full.log);
        let mut resumed = Trainer::resume(&dir.path().join("a/checkpoints/step_00000002"), &data, log.clone()).unwrap();
        assert_eq!(resumed.step, 2);
        resumed.fit(&dir.path().join("b"), |_, _| {}).unwrap();
        assert_eq!(resumed.log, full.log);
        for f in [
            "manifest.txt",
            "tensors/generator/head.weight.pfm",
            "tensors/adam_d.v/d1.weight.pfm",
        ] {
            assert_eq!(
                std::fs::read(dir.path().join("a/checkpoint").join(f)).unwrap(),
                std::fs::read(dir.path().join("b/checkpoint").join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn zero_epochs_saves_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.train.epochs = 0;
        let data = samples(2);
        let ckpt = fit(&cfg, &data, dir.path()).unwrap();
        let init = Model::new(&cfg).unwrap();
        let back = checkpoint::load(&ckpt, init.generator.params.clone(), init.discriminator.params.clone()).unwrap();
        assert_eq!(back.generator.checksum(), init.generator.params.checksum());
        assert_eq!(back.step, 0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(fit(&tiny_cfg(), &[], dir.path()), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn log_round_trip() {
        let rows = vec![StepLog {
            step: 1,
            per_loss: 0.1,
            g_loss: 0.7,
            d_loss: 1.3,
            total: 1.07,
        }];
        assert_eq!(parse_log(&render_log(&rows)).unwrap(), rows);
    }
}
