use std::hint::black_box;

use burstlab_bench::synthetic_burst;
use burstlab_core::fusion::{fuse, FusionConfig};
use burstlab_core::geometry::{estimate_homography, warp, AlignConfig, Homography};
use burstlab_core::raw_sensor::extract_channels;
use burstlab_core::scene::band_limited_rgb;
use burstlab_core::score_distill::{make_schedule, vsd_gradient, StationaryGaussianPrior};
use burstlab_core::spectral::{make_mask, project, Band};
use burstlab_core::subspace::{dense_projectors, BccbOperator, KernelSpec};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn projection(c: &mut Criterion) {
    let mut group = c.benchmark_group("project_high");
    for n in [64, 256] {
        let img = band_limited_rgb(n, n, n / 4, 1);
        let mask = make_mask(n, n, 0.8, 0.2, 4.0).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| project(black_box(&img), &mask, Band::High).unwrap())
        });
    }
    group.finish();
}

fn fusion(c: &mut Criterion) {
    let (_, burst) = synthetic_burst(128, 8, 2);
    let cfg = FusionConfig {
        sr_factor: 2,
        use_given_trajectory: true,
        ..FusionConfig::default()
    };
    c.bench_function("fuse_8x64_to_128", |b| {
        b.iter(|| fuse(black_box(&burst), &burst.trajectory, &cfg).unwrap())
    });
}

fn alignment(c: &mut Criterion) {
    let scene = band_limited_rgb(128, 128, 12, 4).luma();
    let moved = warp(&scene, &Homography::translation(1.7, -0.6)).unwrap().image;
    let reference = scene.crop(8, 8, 112, 112).unwrap();
    let moving = moved.crop(8, 8, 112, 112).unwrap();
    let cfg = AlignConfig::default();
    c.bench_function("estimate_homography_112", |b| {
        b.iter(|| estimate_homography(black_box(&reference), &moving, &cfg).unwrap())
    });
}

fn demosaic(c: &mut Criterion) {
    let (_, burst) = synthetic_burst(256, 2, 1);
    let frame = &burst.frames()[1];
    c.bench_function("extract_channels_256", |b| b.iter(|| extract_channels(black_box(frame))));
}

fn vsd(c: &mut Criterion) {
    let n = 64;
    let x = band_limited_rgb(n, n, 8, 2);
    let mask = make_mask(n, n, 0.8, 0.2, 4.0).unwrap();
    let prior = StationaryGaussianPrior::banded(x.map(|v| v + 0.1), mask.gains(), 0.01).unwrap();
    let eps = band_limited_rgb(n, n, 8, 3);
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    c.bench_function("vsd_gradient_64", |b| {
        b.iter(|| vsd_gradient(black_box(&x), &prior, 500, &eps, &sched, 1.0).unwrap())
    });
}

fn null_space_oracle(c: &mut Criterion) {
    let op = BccbOperator::from_spec(8, &KernelSpec::GaussianBox(1.0), 1).unwrap();
    c.bench_function("dense_projectors_8", |b| b.iter(|| dense_projectors(black_box(&op)).unwrap()));
}

criterion_group!(benches, projection, fusion, alignment, demosaic, vsd, null_space_oracle);
criterion_main!(benches);
