//! im2col-based convolution kernels, forward and backward.

use super::tensor::{Scalar, Tensor};

/// Geometry of a square-kernel convolution over a `c x h x w` input.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        Geom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    pub fn im2col<T: Scalar>(&self, src: &[T], cols: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let n = self.col_cols();
        for c in 0..self.c {
            let plane = &src[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * n..][..n];
                    for oy in 0..self.oh {
                        let iy = (oy * s + ki) as isize - p;
                        let out = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let line = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p;
                            *o = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                line[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    pub fn col2im_add<T: Scalar>(&self, cols: &[T], dst: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let n = self.col_cols();
        for c in 0..self.c {
            let plane = &mut dst[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * n..][..n];
                    for oy in 0..self.oh {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &v) in row[oy * self.ow..(oy + 1) * self.ow].iter().enumerate() {
                            let ix = (ox * s + kj) as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                line[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Column matrix of `src`, borrowing it when the convolution is pointwise.
    fn cols<'a, T: Scalar>(&self, src: &'a [T], scratch: &'a mut Vec<T>) -> &'a [T] {
        if self.is_pointwise() {
            src
        } else {
            scratch.resize(self.col_rows() * self.col_cols(), T::zero());
            self.im2col(src, scratch);
            scratch
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

fn bias_grad<T: Scalar>(gy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = gy.shape();
    let mut gb = vec![T::zero(); c];
    for i in 0..n {
        let item = gy.item(i);
        for (ch, g) in gb.iter_mut().enumerate() {
            *g += item[ch * h * w..(ch + 1) * h * w].iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec([c, 1, 1, 1], gb)
}

/// `x: [n, ci, h, w]`, `w: [co, ci, k, k]`, optional `b: [co, 1, 1, 1]`.
pub(crate) fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [n, ci, h, wd] = x.shape();
    let [co, wci, k, _] = w.shape();
    assert_eq!(ci, wci, "conv2d input channels");
    let g = Geom::new(ci, h, wd, k, stride, pad);
    let mut out = Tensor::zeros([n, co, g.oh, g.ow]);
    let mut scratch = Vec::new();
    for i in 0..n {
        let cols = g.cols(x.item(i), &mut scratch);
        let y = out.item_mut(i);
        T::gemm(co, g.col_rows(), g.col_cols(), w.data(), false, cols, false, y, false);
        if let Some(b) = b {
            add_bias(y, b.data(), g.col_cols());
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub x: Option<Tensor<T>>,
    pub w: Option<Tensor<T>>,
    pub b: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads<T> {
    let [n, ci, h, wd] = x.shape();
    let [co, _, k, _] = w.shape();
    let g = Geom::new(ci, h, wd, k, stride, pad);
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_w.then(|| Tensor::zeros(w.shape()));
    let mut scratch = Vec::new();
    let mut dcols = Vec::new();
    for i in 0..n {
        let gyi = gy.item(i);
        if let Some(gw) = gw.as_mut() {
            let cols = g.cols(x.item(i), &mut scratch);
            // dW += dY (co x n) * cols^T (n x rows)
            T::gemm(co, ncols, rows, gyi, false, cols, true, gw.data_mut(), true);
        }
        if let Some(gx) = gx.as_mut() {
            if g.is_pointwise() {
                T::gemm(rows, co, ncols, w.data(), true, gyi, false, gx.item_mut(i), true);
            } else {
                dcols.resize(rows * ncols, T::zero());
                T::gemm(rows, co, ncols, w.data(), true, gyi, false, &mut dcols, false);
                g.col2im_add(&dcols, gx.item_mut(i));
            }
        }
    }
    ConvGrads {
        x: gx,
        w: gw,
        b: need_b.then(|| bias_grad(gy)),
    }
}

/// Output size of a padding-free transposed convolution.
pub(crate) fn transposed_out(len: usize, k: usize, stride: usize) -> usize {
    (len - 1) * stride + k
}

/// `x: [n, ci, h, w]`, `w: [ci, co, k, k]`; no padding.
pub(crate) fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
) -> Tensor<T> {
    let [n, ci, h, wd] = x.shape();
    let [wci, co, k, _] = w.shape();
    assert_eq!(ci, wci, "conv_transpose2d input channels");
    let (oh, ow) = (transposed_out(h, k, stride), transposed_out(wd, k, stride));
    // The transposed conv is the adjoint of a conv from (co, oh, ow) to (ci, h, w).
    let g = Geom::new(co, oh, ow, k, stride, 0);
    debug_assert_eq!((g.oh, g.ow), (h, wd));
    let mut out = Tensor::zeros([n, co, oh, ow]);
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for i in 0..n {
        T::gemm(
            g.col_rows(),
            ci,
            g.col_cols(),
            w.data(),
            true,
            x.item(i),
            false,
            &mut cols,
            false,
        );
        let y = out.item_mut(i);
        g.col2im_add(&cols, y);
        if let Some(b) = b {
            add_bias(y, b.data(), oh * ow);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads<T> {
    let [n, ci, _, _] = x.shape();
    let [_, co, k, _] = w.shape();
    let [_, _, oh, ow] = gy.shape();
    let g = Geom::new(co, oh, ow, k, stride, 0);
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_w.then(|| Tensor::zeros(w.shape()));
    let mut cols = vec![T::zero(); rows * ncols];
    for i in 0..n {
        g.im2col(gy.item(i), &mut cols);
        if let Some(gx) = gx.as_mut() {
            // dX (ci x hw) = W (ci x rows) * cols (rows x hw)
            T::gemm(ci, rows, ncols, w.data(), false, &cols, false, gx.item_mut(i), false);
        }
        if let Some(gw) = gw.as_mut() {
            // dW (ci x rows) += X (ci x hw) * cols^T (hw x rows)
            T::gemm(ci, ncols, rows, x.item(i), false, &cols, true, gw.data_mut(), true);
        }
    }
    ConvGrads {
        x: gx,
        w: gw,
        b: need_b.then(|| bias_grad(gy)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used as the reference.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [n, ci, h, wd] = x.shape();
        let [co, _, k, _] = w.shape();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * co * oh * ow];
        for b in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at(b, c, iy as usize, ix as usize) * w.at(o, c, ky, kx);
                                    }
                                }
                            }
                        }
                        out[((b * co + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec([n, co, oh, ow], out)
    }

    fn ramp(shape: [usize; 4], seed: f64) -> Tensor<f64> {
        let n = shape.iter().product::<usize>();
        Tensor::from_vec(shape, (0..n).map(|i| (i as f64 * 0.37 + seed).sin()).collect())
    }

    #[test]
    fn conv_matches_naive() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (4, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let x = ramp([2, 3, 8, 8], 0.1);
            let w = ramp([4, 3, k, k], 0.7);
            let got = conv2d(&x, &w, None, s, p);
            let want = naive_conv(&x, &w, s, p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn transposed_is_adjoint_of_conv() {
        // <conv(u), v> == <u, convT(v)> with the same weights reinterpreted.
        let u = ramp([1, 3, 8, 8], 0.3);
        let w = ramp([5, 3, 2, 2], 0.9);
        let cu = conv2d(&u, &w, None, 2, 0);
        let v = ramp(cu.shape(), 1.7);
        let tv = conv_transpose2d(&v, &w, None, 2);
        assert_eq!(tv.shape(), u.shape());
        let lhs: f64 = cu.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.data().iter().zip(tv.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transposed_doubles() {
        let x = ramp([1, 4, 4, 4], 0.0);
        let w = ramp([4, 2, 2, 2], 0.5);
        assert_eq!(conv_transpose2d(&x, &w, None, 2).shape(), [1, 2, 8, 8]);
    }
}
