//! Central-difference check of the generator objective in double precision.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::caption::StandinBackbone;
use crate::error::Result;
use crate::generator::{Generator, GeneratorConfig};
use crate::losses::{Discriminator, GanVariant, LossWeights, PerceptualExtractorConfig, PerceptualLoss};
use crate::nn::{Graph, ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub generator: GeneratorConfig,
    pub size: usize,
    pub batch: usize,
    pub weights: LossWeights,
    pub step: f64,
    /// Fraction of generator parameters to probe.
    pub param_fraction: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            generator: GeneratorConfig::with_channels(vec![2, 4]),
            size: 8,
            batch: 2,
            weights: LossWeights::default(),
            step: 1e-4,
            param_fraction: 0.01,
            seed: 17,
        }
    }
}

/// One probed coordinate.
#[derive(Clone, Debug)]
pub struct Probe {
    pub what: String,
    pub analytic: f64,
    pub numeric: f64,
    /// The `+h` and `-h` evaluations sit on different linear pieces of a
    /// ReLU or max-pool, so the difference quotient does not estimate the
    /// derivative.
    pub kinked: bool,
}

impl Probe {
    /// `|a - n| / max(|a|, |n|)`, or the absolute difference when both are
    /// below `floor`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        let d = (self.analytic - self.numeric).abs();
        let m = self.analytic.abs().max(self.numeric.abs());
        if m < floor {
            d
        } else {
            d / m
        }
    }
}

struct Problem {
    gen: Generator<f64>,
    disc: Discriminator<f64>,
    per: PerceptualLoss<f64>,
    x: Tensor<f64>,
    caps: Option<Vec<Tensor<f64>>>,
    target: Tensor<f64>,
    w: LossWeights,
}

impl Problem {
    /// Total generator loss; with `grads`, also the input and parameter gradients.
    fn eval(
        &self,
        params: &ParamStore<f64>,
        x: &Tensor<f64>,
        grads: bool,
    ) -> Result<(f64, u64, Option<(Tensor<f64>, ParamGrads)>)> {
        let mut g = Graph::<f64>::new(true);
        let xv = g.variable(x.clone());
        let cv = self
            .caps
            .as_ref()
            .map(|c| c.iter().map(|t| g.constant(t.clone())).collect::<Vec<_>>());
        let out = self.gen.forward(&mut g, &params.bind(true), xv, cv.as_deref())?;
        let t = g.constant(self.target.clone());
        let per = self.per.forward(&mut g, out.output, t)?;
        let logits = self.disc.forward(&mut g, out.output, false);
        let gan = GanVariant::NonSaturating.g_loss(&mut g, logits);
        let a = g.scale(per, self.w.alpha);
        let b = g.scale(gan, self.w.beta);
        let total = g.add(a, b);
        let v = g.scalar(total);
        let pattern = g.kink_pattern();
        if !grads {
            return Ok((v, pattern, None));
        }
        g.backward(total);
        let gx = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((v, pattern, Some((gx, g.param_grads(params)))))
    }
}

type ParamGrads = std::collections::BTreeMap<String, Tensor<f64>>;

/// Probes every input coordinate and a seeded sample of generator parameters.
pub fn run(cfg: &GradCheckConfig) -> Result<Vec<Probe>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, s) = (cfg.batch, cfg.size);
    let gen = Generator::<f64>::new(cfg.generator.clone(), cfg.seed)?;
    let mut x = Tensor::zeros([n, cfg.generator.in_channels, s, s]);
    x.data_mut().iter_mut().for_each(|v| *v = rng.random::<f64>());
    let mut target = Tensor::zeros([n, 1, s, s]);
    target.data_mut().iter_mut().for_each(|v| *v = rng.random::<f64>());
    let caps = cfg.generator.caption_channels.as_ref().map(|ch| {
        let bb = StandinBackbone::new(ch, cfg.seed ^ 1);
        bb.forward(&x.cast()).into_iter().map(|t| t.cast()).collect()
    });
    let problem = Problem {
        disc: Discriminator::new(2, cfg.seed ^ 2),
        per: PerceptualLoss::new(&PerceptualExtractorConfig::default())?,
        x: x.clone(),
        caps,
        target,
        w: cfg.weights,
        gen,
    };
    let params = problem.gen.params.clone();
    let (_, _, grads) = problem.eval(&params, &problem.x, true)?;
    let (gx, gp) = grads.expect("gradients requested");
    let h = cfg.step;
    let mut probes = Vec::new();

    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let (fp, kp, _) = problem.eval(&params, &xp, false)?;
        let (fm, km, _) = problem.eval(&params, &xm, false)?;
        probes.push(Probe {
            what: format!("input[{i}]"),
            analytic: gx.data()[i],
            numeric: (fp - fm) / (2.0 * h),
            kinked: kp != km,
        });
    }

    let coords: Vec<(String, usize)> = params
        .trainable_names()
        .into_iter()
        .flat_map(|name| {
            let k = params.get(&name).expect("listed").numel();
            (0..k).map(move |i| (name.clone(), i))
        })
        .collect();
    let count = ((coords.len() as f64 * cfg.param_fraction).ceil() as usize).clamp(1, coords.len());
    for j in sample(&mut rng, coords.len(), count).into_vec() {
        let (name, i) = &coords[j];
        let mut pp = params.clone();
        pp.get_mut(name).expect("listed").data_mut()[*i] += h;
        let mut pm = params.clone();
        pm.get_mut(name).expect("listed").data_mut()[*i] -= h;
        let (fp, kp, _) = problem.eval(&pp, &problem.x, false)?;
        let (fm, km, _) = problem.eval(&pm, &problem.x, false)?;
        probes.push(Probe {
            what: format!("{name}[{i}]"),
            analytic: gp[name].data()[*i],
            numeric: (fp - fm) / (2.0 * h),
            kinked: kp != km,
        });
    }
    Ok(probes)
}

/// Outcome over the probes that stayed on one linear piece.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub checked: usize,
    pub kinked: usize,
    pub worst_rel_error: f64,
}

/// Gradients below this magnitude are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

pub fn summarize(probes: &[Probe]) -> Summary {
    let smooth: Vec<&Probe> = probes.iter().filter(|p| !p.kinked).collect();
    Summary {
        checked: smooth.len(),
        kinked: probes.len() - smooth.len(),
        worst_rel_error: smooth.iter().map(|p| p.rel_error(ABS_FLOOR)).fold(0.0, f64::max),
    }
}
