//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as
//! leaves bound by name, so after [`Graph::backward`] their gradients can be
//! collected with [`Graph::param_grads`].

use std::collections::BTreeMap;

use super::conv;
use super::params::{Bind, ParamStore};
use super::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    /// Normalization with per-channel statistics; `xhat` is kept for backward.
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Concat(Var, Var),
    CenterCrop {
        x: Var,
        top: usize,
        left: usize,
    },
    SpatialMul {
        att: Var,
        f: Var,
    },
    RepeatChannels(Var, usize),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<T>,
    },
    MseMean(Var, Var),
    BceLogitsMean {
        x: Var,
        target: T,
    },
    SqErrConstMean {
        x: Var,
        target: T,
    },
    Scale(Var, T),
    Add(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-channel statistics produced by a training-mode batch norm, consumed by
/// the owning layer to update its running estimates.
#[derive(Clone, Debug)]
pub struct BufferUpdate<T> {
    pub name: String,
    pub value: Tensor<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    bound: BTreeMap<String, Var>,
    training: bool,
    updates: Vec<BufferUpdate<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new(training: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: BTreeMap::new(),
            training,
            updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Activation pattern of every piecewise-linear node: the sign of each
    /// (leaky) ReLU input and each max-pool argmax, hashed. Two evaluations
    /// with equal patterns lie on the same linear piece.
    pub fn kink_pattern(&self) -> u64 {
        let mut h = super::params::Fnv::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => {
                    for &v in self.nodes[x.0].value.data() {
                        h.byte((v > T::zero()) as u8);
                    }
                }
                Op::MaxPool2 { argmax, .. } => {
                    for &i in argmax {
                        h.bytes(&(i as u64).to_le_bytes());
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked, e.g. a network input under a gradient check.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a named parameter from `bind.store`. Repeated binds of the same
    /// name return the same leaf.
    pub fn param(&mut self, bind: &Bind<'_, T>, name: &str) -> Var {
        let key = bind.key(name);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let t = bind
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {key}"))
            .clone();
        let v = self.push(t, Op::Leaf, bind.trainable);
        self.bound.insert(key, v);
        v
    }

    pub fn record_update(&mut self, name: String, value: Tensor<T>) {
        self.updates.push(BufferUpdate { name, value });
    }

    pub fn take_updates(&mut self) -> Vec<BufferUpdate<T>> {
        std::mem::take(&mut self.updates)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let y = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(y, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let y = conv::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride);
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(y, Op::ConvTranspose2d { x, w, b, stride }, ng)
    }

    /// Batch normalization. With `stats = None` the batch statistics are used
    /// and returned as `(mean, unbiased variance)`; otherwise the provided
    /// running `(mean, var)` are applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> (Var, Option<(Vec<T>, Vec<T>)>) {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let plane = h * w;
        let m = n * plane;
        let (mean, var_biased) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec()),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for i in 0..n {
                        s += xv.item(i)[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>();
                    }
                    let mu = s / T::of(m as f64);
                    let mut q = T::zero();
                    for i in 0..n {
                        for &v in &xv.item(i)[ch * plane..(ch + 1) * plane] {
                            q += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = q / T::of(m as f64);
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut y = Tensor::zeros(xv.shape());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for i in 0..n {
            let src = xv.item(i);
            let base = i * c * plane;
            for ch in 0..c {
                for p in 0..plane {
                    let idx = ch * plane + p;
                    let xh = (src[idx] - mean[ch]) * inv_std[ch];
                    xhat[base + idx] = xh;
                    y.item_mut(i)[idx] = g[ch] * xh + b[ch];
                }
            }
        }
        let batch_stats = running.is_none();
        let stats = batch_stats.then(|| {
            let corr = if m > 1 {
                T::of(m as f64 / (m - 1) as f64)
            } else {
                T::one()
            };
            (mean, var_biased.iter().map(|&v| v * corr).collect())
        });
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        );
        (v, stats)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.needs(x);
        self.push(y, Op::Relu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let ng = self.needs(x);
        self.push(y, Op::LeakyRelu(x, slope), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push(y, Op::Sigmoid(x), ng)
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let [n, ca, h, w] = av.shape();
        let [nb, cb, hb, wb] = bv.shape();
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial/batch mismatch");
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(av.item(i));
            data.extend_from_slice(bv.item(i));
        }
        let y = Tensor::from_vec([n, ca + cb, h, w], data);
        let ng = self.needs(a) || self.needs(b);
        self.push(y, Op::Concat(a, b), ng)
    }

    /// Crop the spatial window of size `h x w` centred in `x`.
    pub fn center_crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let [n, c, xh, xw] = xv.shape();
        assert!(xh >= h && xw >= w, "crop target larger than input");
        let (top, left) = ((xh - h) / 2, (xw - w) / 2);
        if (top, left, h, w) == (0, 0, xh, xw) {
            return x;
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    let row = ((i * c + ch) * xh + top + y) * xw + left;
                    data.extend_from_slice(&xv.data()[row..row + w]);
                }
            }
        }
        let y = Tensor::from_vec([n, c, h, w], data);
        let ng = self.needs(x);
        self.push(y, Op::CenterCrop { x, top, left }, ng)
    }

    /// `att: [n, 1, h, w]` broadcast over the channels of `f: [n, c, h, w]`.
    pub fn spatial_mul(&mut self, att: Var, f: Var) -> Var {
        let (av, fv) = (self.value(att), self.value(f));
        let [n, c, h, w] = fv.shape();
        assert_eq!(av.shape(), [n, 1, h, w], "attention map shape");
        let plane = h * w;
        let mut y = fv.clone();
        for i in 0..n {
            let a = av.item(i).to_vec();
            for ch in 0..c {
                for (v, &s) in y.item_mut(i)[ch * plane..(ch + 1) * plane].iter_mut().zip(&a) {
                    *v *= s;
                }
            }
        }
        let ng = self.needs(att) || self.needs(f);
        self.push(y, Op::SpatialMul { att, f }, ng)
    }

    pub fn repeat_channels(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let mut data = Vec::with_capacity(n * c * times * h * w);
        for i in 0..n {
            for _ in 0..times {
                data.extend_from_slice(xv.item(i));
            }
        }
        let y = Tensor::from_vec([n, c * times, h, w], data);
        let ng = self.needs(x);
        self.push(y, Op::RepeatChannels(x, times), ng)
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let (oh, ow) = (h / 2, w / 2);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    data.push(src[best]);
                    argmax.push((plane * h * w + best) as u32);
                }
            }
        }
        let y = Tensor::from_vec([n, c, oh, ow], data);
        let ng = self.needs(x);
        self.push(y, Op::MaxPool2 { x, argmax }, ng)
    }

    /// `y = (x - shift[c]) * scale[c]` with constant per-channel coefficients.
    pub fn channel_affine(&mut self, x: Var, shift: &[T], scale: &[T]) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        assert!(shift.len() == c && scale.len() == c);
        let mut y = xv.clone();
        for i in 0..n {
            for ch in 0..c {
                for v in &mut y.item_mut(i)[ch * h * w..(ch + 1) * h * w] {
                    *v = (*v - shift[ch]) * scale[ch];
                }
            }
        }
        let ng = self.needs(x);
        self.push(
            y,
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
            },
            ng,
        )
    }

    /// Mean of squared differences, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let s: T = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let y = Tensor::scalar(s / T::of(av.numel() as f64));
        let ng = self.needs(a) || self.needs(b);
        self.push(y, Op::MseMean(a, b), ng)
    }

    /// Mean binary cross-entropy of logits against a constant label.
    pub fn bce_with_logits(&mut self, x: Var, target: T) -> Var {
        let xv = self.value(x);
        let s: T = xv.data().iter().map(|&l| bce_logit(l, target)).sum();
        let y = Tensor::scalar(s / T::of(xv.numel() as f64));
        let ng = self.needs(x);
        self.push(y, Op::BceLogitsMean { x, target }, ng)
    }

    /// Mean of `(x - target)^2` for a constant target.
    pub fn sq_err_const(&mut self, x: Var, target: T) -> Var {
        let xv = self.value(x);
        let s: T = xv.data().iter().map(|&v| (v - target) * (v - target)).sum();
        let y = Tensor::scalar(s / T::of(xv.numel() as f64));
        let ng = self.needs(x);
        self.push(y, Op::SqErrConstMean { x, target }, ng)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let y = self.value(x).map(|v| v * k);
        let ng = self.needs(x);
        self.push(y, Op::Scale(x, k), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(y, Op::Add(a, b), ng)
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).numel(), 1, "backward root must be a scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].needs_grad {
                self.propagate(i, &gy);
            }
            self.grads[i] = Some(gy);
        }
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, gy: &Tensor<T>) {
        let mut out: Vec<(Var, Tensor<T>)> = Vec::new();
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let g = conv::conv2d_backward(
                    val(x),
                    val(w),
                    gy,
                    stride,
                    pad,
                    needs(x),
                    needs(w),
                    b.is_some_and(needs),
                );
                push_grads(&mut out, x, w, b, g);
            }
            &Op::ConvTranspose2d { x, w, b, stride } => {
                let g = conv::conv_transpose2d_backward(
                    val(x),
                    val(w),
                    gy,
                    stride,
                    needs(x),
                    needs(w),
                    b.is_some_and(needs),
                );
                push_grads(&mut out, x, w, b, g);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = gy.shape();
                let plane = h * w;
                let m = T::of((n * plane) as f64);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for s in 0..n {
                    let g = gy.item(s);
                    let base = s * c * plane;
                    for ch in 0..c {
                        for p in 0..plane {
                            let idx = ch * plane + p;
                            sum_dy[ch] += g[idx];
                            sum_dy_xhat[ch] += g[idx] * xhat[base + idx];
                        }
                    }
                }
                if needs(*x) {
                    let gamma_v = val(*gamma).data();
                    let mut gx = Tensor::zeros(gy.shape());
                    for s in 0..n {
                        let base = s * c * plane;
                        let g = gy.item(s);
                        let dst = gx.item_mut(s);
                        for ch in 0..c {
                            let k = gamma_v[ch] * inv_std[ch];
                            for p in 0..plane {
                                let idx = ch * plane + p;
                                dst[idx] = if *batch_stats {
                                    k * (g[idx] - sum_dy[ch] / m - xhat[base + idx] * sum_dy_xhat[ch] / m)
                                } else {
                                    k * g[idx]
                                };
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                if needs(*gamma) {
                    out.push((*gamma, Tensor::from_vec([c, 1, 1, 1], sum_dy_xhat)));
                }
                if needs(*beta) {
                    out.push((*beta, Tensor::from_vec([c, 1, 1, 1], sum_dy)));
                }
            }
            &Op::Relu(x) => {
                let xv = val(x);
                let mut g = gy.clone();
                for (d, &v) in g.data_mut().iter_mut().zip(xv.data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                out.push((x, g));
            }
            &Op::LeakyRelu(x, slope) => {
                let xv = val(x);
                let mut g = gy.clone();
                for (d, &v) in g.data_mut().iter_mut().zip(xv.data()) {
                    if v <= T::zero() {
                        *d *= slope;
                    }
                }
                out.push((x, g));
            }
            &Op::Sigmoid(x) => {
                let mut g = gy.clone();
                for (d, &s) in g.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= s * (T::one() - s);
                }
                out.push((x, g));
            }
            &Op::Concat(a, b) => {
                let [n, _, h, w] = gy.shape();
                let ca = val(a).shape()[1];
                let cb = val(b).shape()[1];
                let split = ca * h * w;
                let mut ga = Vec::with_capacity(n * split);
                let mut gb = Vec::with_capacity(n * cb * h * w);
                for s in 0..n {
                    let item = gy.item(s);
                    ga.extend_from_slice(&item[..split]);
                    gb.extend_from_slice(&item[split..]);
                }
                if needs(a) {
                    out.push((a, Tensor::from_vec([n, ca, h, w], ga)));
                }
                if needs(b) {
                    out.push((b, Tensor::from_vec([n, cb, h, w], gb)));
                }
            }
            &Op::CenterCrop { x, top, left } => {
                let [n, c, xh, xw] = val(x).shape();
                let [_, _, h, w] = gy.shape();
                let mut g = Tensor::zeros([n, c, xh, xw]);
                for plane in 0..n * c {
                    for y in 0..h {
                        let dst = (plane * xh + top + y) * xw + left;
                        let src = (plane * h + y) * w;
                        g.data_mut()[dst..dst + w].copy_from_slice(&gy.data()[src..src + w]);
                    }
                }
                out.push((x, g));
            }
            &Op::SpatialMul { att, f } => {
                let (av, fv) = (val(att), val(f));
                let [n, c, h, w] = fv.shape();
                let plane = h * w;
                if needs(att) {
                    let mut ga = Tensor::zeros(av.shape());
                    for s in 0..n {
                        let (g, fi) = (gy.item(s), fv.item(s));
                        let dst = ga.item_mut(s);
                        for ch in 0..c {
                            for p in 0..plane {
                                dst[p] += g[ch * plane + p] * fi[ch * plane + p];
                            }
                        }
                    }
                    out.push((att, ga));
                }
                if needs(f) {
                    let mut gf = gy.clone();
                    for s in 0..n {
                        let a = av.item(s);
                        for ch in 0..c {
                            for (d, &m) in gf.item_mut(s)[ch * plane..(ch + 1) * plane].iter_mut().zip(a) {
                                *d *= m;
                            }
                        }
                    }
                    out.push((f, gf));
                }
            }
            &Op::RepeatChannels(x, times) => {
                let xv = val(x);
                let len = xv.item_len();
                let mut g = Tensor::zeros(xv.shape());
                for s in 0..xv.shape()[0] {
                    let src = gy.item(s);
                    let dst = g.item_mut(s);
                    for t in 0..times {
                        for (d, &v) in dst.iter_mut().zip(&src[t * len..(t + 1) * len]) {
                            *d += v;
                        }
                    }
                }
                out.push((x, g));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut g = Tensor::zeros(val(*x).shape());
                for (&idx, &d) in argmax.iter().zip(gy.data()) {
                    g.data_mut()[idx as usize] += d;
                }
                out.push((*x, g));
            }
            Op::ChannelAffine { x, scale } => {
                let [n, c, h, w] = gy.shape();
                let mut g = gy.clone();
                for s in 0..n {
                    for ch in 0..c {
                        for d in &mut g.item_mut(s)[ch * h * w..(ch + 1) * h * w] {
                            *d *= scale[ch];
                        }
                    }
                }
                out.push((*x, g));
            }
            &Op::MseMean(a, b) => {
                let (av, bv) = (val(a), val(b));
                let k = gy.data()[0] * T::of(2.0 / av.numel() as f64);
                let diff: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * k).collect();
                if needs(b) {
                    out.push((b, Tensor::from_vec(bv.shape(), diff.iter().map(|&d| -d).collect())));
                }
                if needs(a) {
                    out.push((a, Tensor::from_vec(av.shape(), diff)));
                }
            }
            &Op::BceLogitsMean { x, target } => {
                let xv = val(x);
                let k = gy.data()[0] / T::of(xv.numel() as f64);
                out.push((x, xv.map(|l| (sigmoid(l) - target) * k)));
            }
            &Op::SqErrConstMean { x, target } => {
                let xv = val(x);
                let k = gy.data()[0] * T::of(2.0 / xv.numel() as f64);
                out.push((x, xv.map(|v| (v - target) * k)));
            }
            &Op::Scale(x, k) => out.push((x, gy.map(|d| d * k))),
            &Op::Add(a, b) => {
                if needs(a) {
                    out.push((a, gy.clone()));
                }
                if needs(b) {
                    out.push((b, gy.clone()));
                }
            }
        }
        for (v, g) in out {
            if self.nodes[v.0].needs_grad {
                self.accumulate(v, g);
            }
        }
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter bound into this graph, keyed by
    /// the parameter's full name. Parameters the loss does not reach get zeros.
    pub fn param_grads(&self, store: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (key, &v) in &self.bound {
            let Some(name) = key.strip_prefix(&format!("{}/", store.id())) else {
                continue;
            };
            if !self.nodes[v.0].needs_grad {
                continue;
            }
            let g = self
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            out.insert(name.to_string(), g);
        }
        out
    }

    /// Names of parameters from `store` that were bound as trainable.
    pub fn bound_trainable(&self, store: &ParamStore<T>) -> Vec<String> {
        let prefix = format!("{}/", store.id());
        self.bound
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .filter_map(|(k, _)| k.strip_prefix(&prefix).map(str::to_string))
            .collect()
    }

    /// Whether a gradient actually reached the leaf bound under `name`.
    pub fn has_grad(&self, store: &ParamStore<T>, name: &str) -> bool {
        self.bound
            .get(&format!("{}/{name}", store.id()))
            .is_some_and(|&v| self.grad(v).is_some())
    }
}

fn push_grads<T>(out: &mut Vec<(Var, Tensor<T>)>, x: Var, w: Var, b: Option<Var>, g: conv::ConvGrads<T>) {
    if let Some(gx) = g.x {
        out.push((x, gx));
    }
    if let Some(gw) = g.w {
        out.push((w, gw));
    }
    if let (Some(b), Some(gb)) = (b, g.b) {
        out.push((b, gb));
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `BCE(sigmoid(l), t)`.
#[inline]
pub fn bce_logit<T: Scalar>(l: T, t: T) -> T {
    l.max(T::zero()) - l * t + (T::one() + (-l.abs()).exp()).ln()
}
