use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use seqot_bench::band_problem;
use seqot_core::align::compute_pseudo_labels;
use seqot_core::ot::{scale_log, Potentials, Relaxation};
use seqot_core::train::pair_step;
use seqot_core::{generate, solve_fgw, AlignConfig, SolverConfig, SynthParams, TrainConfig};

fn fixed_budget() -> SolverConfig {
    SolverConfig {
        outer_iters: 5,
        tol: 1e-300,
        inner_tol: 1e-300,
        ..SolverConfig::default()
    }
}

fn fgw_scaling(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_fgw");
    group.sample_size(10);
    let cfg = fixed_budget();
    for n in [128, 256, 512, 1024] {
        let (bundle, p, q) = band_problem(n, 256, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| solve_fgw(black_box(&bundle), &p, &q, &cfg).unwrap())
        });
    }
    group.finish();
}

fn scaling_sweeps(c: &mut Criterion) {
    let mut group = c.benchmark_group("scale_log");
    for n in [64, 256] {
        let (bundle, p, q) = band_problem(n, n, 2);
        let kernel = bundle.kot_cost.mapv(|v| -v / 0.07);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                let mut pot = Potentials::zeros(n, n);
                scale_log(kernel.view(), &p, &q, Relaxation::Hard, Relaxation::Hard, 0.07, 50, 1e-300, &mut pot).unwrap()
            })
        });
    }
    group.finish();
}

fn pipeline(c: &mut Criterion) {
    let ds = generate(&SynthParams::default()).unwrap();
    let (x, y) = (&ds.videos[0].features, &ds.videos[1].features);
    c.bench_function("pseudo_labels_100x100", |b| {
        b.iter(|| compute_pseudo_labels(black_box(x), black_box(y), &AlignConfig::default()).unwrap())
    });
    let cfg = TrainConfig::default();
    let videos: Vec<_> = ds.videos.iter().map(|v| &v.features).collect();
    let model = seqot_core::train::init_model(&videos, ds.n_classes(), &cfg).unwrap();
    let clip: Vec<usize> = (0..40).map(|i| i * 100 / 40).collect();
    let (cx, cy) = (x.select(&clip).unwrap(), y.select(&clip).unwrap());
    c.bench_function("train_pair_step_40", |b| b.iter(|| pair_step(&model, black_box(&cx), black_box(&cy), &cfg).unwrap()));
}

criterion_group!(benches, fgw_scaling, scaling_sweeps, pipeline);
criterion_main!(benches);
