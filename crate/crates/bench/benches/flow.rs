use criterion::{criterion_group, criterion_main, Criterion};
use ddln_core::experiments::{min_l1_norm, random_problem, solve_kkt_bias, sparse_interpolation_problem};
use ddln_core::flow::{integrate, layer_rhs, StepController};
use ddln_core::mirror::DlnEntropy;
use ddln_core::model::{init_layers, InitScheme};
use ddln_core::paramcheck::{commuting_defect, jacobian_rank, FlatParams, RANK_TOL};
use std::hint::black_box;

fn rhs(c: &mut Criterion) {
    let loss = random_problem(10, 8, 0).unwrap();
    let s = init_layers(8, 6, &InitScheme::Uniform { scale: 1.0 }, 0).unwrap();
    c.bench_function("layer_rhs L=6 d=8", |b| {
        b.iter(|| layer_rhs(black_box(&s), &loss).unwrap())
    });
}

fn fixed_rk4(c: &mut Criterion) {
    let loss = random_problem(10, 5, 1).unwrap();
    let s = init_layers(5, 4, &InitScheme::Uniform { scale: 1.0 }, 1).unwrap();
    let ctrl = StepController::fixed(1e-3, 1.0);
    c.bench_function("rk4 fixed 1000 steps L=4 d=5", |b| {
        b.iter(|| integrate(black_box(&s), &loss, &ctrl).unwrap())
    });
}

fn adaptive(c: &mut Criterion) {
    let loss = random_problem(10, 8, 0).unwrap();
    let s = init_layers(8, 6, &InitScheme::ZeroFirstLayer { scale: 1.4 }, 0).unwrap();
    let ctrl = StepController::adaptive(500.0).with_stop_gap(1e-8);
    c.bench_function("adaptive to gap 1e-8 L=6 d=8", |b| {
        b.iter(|| integrate(black_box(&s), &loss, &ctrl).unwrap())
    });
}

fn kkt(c: &mut Criterion) {
    let loss = sparse_interpolation_problem(3, 6, 2, 0).unwrap();
    let map = DlnEntropy::new(&[0.01; 6], &[0.0; 6]).unwrap();
    c.bench_function("kkt newton n=3 d=6 alpha=0.01", |b| {
        b.iter(|| solve_kkt_bias(black_box(&loss), &map, 1e-11).unwrap())
    });
    c.bench_function("min l1 enumeration n=3 d=6", |b| {
        b.iter(|| min_l1_norm(black_box(&loss)).unwrap())
    });
}

fn paramcheck(c: &mut Criterion) {
    let s = init_layers(8, 4, &InitScheme::Uniform { scale: 1.0 }, 2).unwrap();
    let w = FlatParams::from_stack(&s);
    c.bench_function("commuting defect L=4 d=8", |b| {
        b.iter(|| commuting_defect(black_box(&w), 1, 5).unwrap())
    });
    c.bench_function("jacobian rank L=4 d=8", |b| {
        b.iter(|| jacobian_rank(black_box(&w), RANK_TOL))
    });
}

criterion_group!(benches, rhs, fixed_rk4, adaptive, kkt, paramcheck);
criterion_main!(benches);
