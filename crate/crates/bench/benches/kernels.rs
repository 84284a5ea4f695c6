use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use superpose::attention::fidelity::sphere_instance;
use superpose::attention::{bind_grid, build_feature_map, favor_plus, favor_plus_s, ChannelGrid, FeatureKind, RowSampling};
use superpose::conv::{conv2d, conv2d_backward, isometry_loss, isometry_loss_grad, ConvKernel};
use superpose::macs::{macs_mimoconv, mimoconv_cifar100};
use superpose::vsa::{bind_pwhrr, gen_key, gen_keys, KeyKind};
use superpose::{rng, Grid, Tensor3};

fn tensor(s: &mut rng::Stream, c: usize, h: usize, w: usize) -> Tensor3 {
    Tensor3::from_vec(c, h, w, rng::gaussian_vec(s, c * h * w, 1.0)).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut s = rng::stream(1, 0);
    let x = tensor(&mut s, 32, 16, 16);
    let w = ConvKernel::random(&mut s, 32, 32, 3, 1).unwrap();
    let g = tensor(&mut s, 32, 16, 16);
    c.bench_function("conv2d 32x16x16 k3", |b| b.iter(|| conv2d(black_box(&x), &w).unwrap()));
    c.bench_function("conv2d_backward 32x16x16 k3", |b| b.iter(|| conv2d_backward(black_box(&x), &w, &g).unwrap()));
    c.bench_function("isometry_loss 32x32 k3", |b| b.iter(|| isometry_loss(black_box(&w), 1e-4).unwrap()));
    c.bench_function("isometry_loss_grad 32x32 k3", |b| b.iter(|| isometry_loss_grad(black_box(&w), 1e-4).unwrap()));
}

fn binding(c: &mut Criterion) {
    let mut s = rng::stream(2, 0);
    let x = tensor(&mut s, 64, 16, 16);
    let key = gen_key(3, 64, KeyKind::Gaussian).unwrap();
    c.bench_function("bind_pwhrr 64x16x16", |b| b.iter(|| bind_pwhrr(&key, black_box(&x)).unwrap()));
}

fn attention(c: &mut Criterion) {
    let (l, d, r) = (256, 64, 256);
    let mut s = rng::stream(4, 0);
    let cells: Vec<_> = (0..4).map(|_| sphere_instance(&mut s, l, d).unwrap()).collect();
    let keys = gen_keys(5, 4, d, KeyKind::Bipolar).unwrap();
    let grid = ChannelGrid::new(Grid::from_cells(2, 2, cells).unwrap(), Grid::from_cells(2, 2, keys).unwrap()).unwrap();
    let fm = build_feature_map(6, r, d, FeatureKind::PositiveSoftmaxMap, RowSampling::OrthogonalBlocks).unwrap();
    let bound = bind_grid(&grid);
    let mut group = c.benchmark_group("linear attention 2x2 L256 D64 R256");
    group.bench_function(BenchmarkId::new("favor_plus", "4 cells"), |b| {
        b.iter(|| grid.cells.cells.iter().map(|c| favor_plus(c, &fm).unwrap().ops.multiplies).sum::<u64>())
    });
    group.bench_function(BenchmarkId::new("favor_plus_s", "shared"), |b| b.iter(|| favor_plus_s(black_box(&bound), &fm).unwrap()));
    group.finish();
}

fn macs(c: &mut Criterion) {
    c.bench_function("macs mimoconv N=4", |b| b.iter(|| macs_mimoconv(&mimoconv_cifar100(black_box(4))).unwrap()));
}

criterion_group!(benches, conv, binding, attention, macs);
criterion_main!(benches);
