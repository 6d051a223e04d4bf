use std::hint::black_box;

use caphdr2ir::datasets::synthetic_scene;
use caphdr2ir::metrics::ssim;
use caphdr2ir::nn::{Graph, Tensor};
use caphdr2ir::{tonemap, TonemapParams};
use criterion::{criterion_group, criterion_main, Criterion};

fn ramp(shape: [usize; 4]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| ((i * 37) % 101) as f32 / 101.0 - 0.5).collect())
}

fn conv(c: &mut Criterion) {
    let x = ramp([4, 32, 32, 32]);
    let w = ramp([32, 32, 3, 3]);
    c.bench_function("conv3x3 32ch 32x32 b4 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new(true);
            let xv = g.constant(x.clone());
            let wv = g.variable(w.clone());
            let y = g.conv2d(xv, wv, None, 1, 1);
            let l = g.sq_err_const(y, 0.0);
            g.backward(l);
            black_box(g.grad(wv).map(|t| t.data()[0]))
        })
    });
}

fn tonemap_bench(c: &mut Criterion) {
    let (img, _) = synthetic_scene(256, 1).unwrap();
    let p = TonemapParams::default();
    c.bench_function("tonemap 256x256", |b| b.iter(|| black_box(tonemap(&img, &p).unwrap())));
}

fn ssim_bench(c: &mut Criterion) {
    let a: Vec<f32> = ramp([1, 1, 256, 256]).into_vec().iter().map(|v| v + 0.5).collect();
    let b: Vec<f32> = a.iter().rev().copied().collect();
    c.bench_function("ssim 256x256", |bch| {
        bch.iter(|| black_box(ssim(&a, &b, 256, 256).unwrap()))
    });
}

criterion_group!(benches, conv, tonemap_bench, ssim_bench);
criterion_main!(benches);
