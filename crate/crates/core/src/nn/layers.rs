//! Parameterized layers. Each layer owns parameter names only; values live
//! in a [`ParamStore`].

use super::graph::{Graph, Var};
use super::params::{seeded_normal, Bind, ParamKind, ParamStore};
use super::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    /// 3x3, stride 1, padding 1.
    pub fn same3(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, 3, 1, 1)
    }

    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// He-normal weights, zero bias.
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        let fan_in = (self.cin * self.k * self.k) as f64;
        let w = seeded_normal(
            seed,
            &self.weight(),
            [self.cout, self.cin, self.k, self.k],
            (2.0 / fan_in).sqrt(),
        );
        store.insert(self.weight(), w, ParamKind::Trainable);
        store.insert(self.bias(), Tensor::zeros([self.cout, 1, 1, 1]), ParamKind::Trainable);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bind<'_, T>, x: Var) -> Var {
        let w = g.param(p, &self.weight());
        let b = g.param(p, &self.bias());
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn output_size(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.k) / self.stride + 1
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        ConvTranspose2d {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
        }
    }

    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        // each output pixel sees cin * (k / stride)^2 taps
        let taps = (self.cin * self.k * self.k) as f64 / (self.stride * self.stride) as f64;
        let w = seeded_normal(
            seed,
            &self.weight(),
            [self.cin, self.cout, self.k, self.k],
            (2.0 / taps).sqrt(),
        );
        store.insert(self.weight(), w, ParamKind::Trainable);
        store.insert(self.bias(), Tensor::zeros([self.cout, 1, 1, 1]), ParamKind::Trainable);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bind<'_, T>, x: Var) -> Var {
        let w = g.param(p, &self.weight());
        let b = g.param(p, &self.bias());
        g.conv_transpose2d(x, w, Some(b), self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm2d {
            name: name.into(),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn key(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.name)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let c = [self.channels, 1, 1, 1];
        store.insert(self.key("weight"), Tensor::full(c, T::one()), ParamKind::Trainable);
        store.insert(self.key("bias"), Tensor::zeros(c), ParamKind::Trainable);
        store.insert(self.key("running_mean"), Tensor::zeros(c), ParamKind::Buffer);
        store.insert(self.key("running_var"), Tensor::full(c, T::one()), ParamKind::Buffer);
    }

    /// Training graphs normalize with batch statistics and record the
    /// running-statistic update; evaluation graphs use the running values.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bind<'_, T>, x: Var) -> Var {
        let gamma = g.param(p, &self.key("weight"));
        let beta = g.param(p, &self.key("bias"));
        let eps = T::of(self.eps);
        if !g.training() {
            let rm = p.store.get(&self.key("running_mean")).expect("running_mean");
            let rv = p.store.get(&self.key("running_var")).expect("running_var");
            return g.batch_norm(x, gamma, beta, Some((rm.data(), rv.data())), eps).0;
        }
        let (y, stats) = g.batch_norm(x, gamma, beta, None, eps);
        let (mean, var) = stats.expect("batch statistics");
        let m = T::of(self.momentum);
        for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
            let key = self.key(suffix);
            let old = p.store.get(&key).expect("running statistic");
            let data = old
                .data()
                .iter()
                .zip(&batch)
                .map(|(&o, &b)| (T::one() - m) * o + m * b)
                .collect();
            g.record_update(key, Tensor::from_vec(old.shape(), data));
        }
        y
    }
}
