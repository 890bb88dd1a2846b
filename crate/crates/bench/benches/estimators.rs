use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use nora_bench::desk_setup;
use nora_core::baselines::{ga_mmse, GenieInfo};
use nora_core::mpbsbl::{init_state, iterate, run};
use nora_core::training::backward;
use nora_core::unfolded::{forward, init_weights};

fn bench_mpbsbl(c: &mut Criterion) {
    let (cfg, pilot, s) = desk_setup(10);

    c.bench_function("mpbsbl/iterate", |b| {
        let state = init_state(&cfg);
        b.iter(|| iterate(black_box(&state), &s.y, &pilot, &cfg))
    });

    c.bench_function("mpbsbl/run_nit10", |b| {
        b.iter(|| run(black_box(&s.y), &pilot, &cfg).unwrap())
    });
}

fn bench_unfolded(c: &mut Criterion) {
    let (cfg, pilot, s) = desk_setup(10);
    let ws = init_weights(&cfg);

    c.bench_function("unfolded/forward_nit10", |b| {
        b.iter(|| forward(black_box(&s.y), &pilot, &ws, &cfg).unwrap())
    });

    c.bench_function("unfolded/backward_nit10", |b| {
        let cache = forward(&s.y, &pilot, &ws, &cfg).unwrap();
        b.iter(|| backward(black_box(&cache), &s.y, &s.h_bar, &pilot, &ws, &cfg).unwrap())
    });
}

fn bench_genie(c: &mut Criterion) {
    let (_cfg, pilot, s) = desk_setup(10);
    let genie = GenieInfo {
        active_set: (0..s.alpha.len()).filter(|&k| s.alpha[k]).collect(),
        noise_var: s.noise_var,
    };

    c.bench_function("baselines/ga_mmse", |b| {
        b.iter(|| ga_mmse(black_box(&s.y), &pilot, &genie).unwrap())
    });
}

criterion_group!(benches, bench_mpbsbl, bench_unfolded, bench_genie);
criterion_main!(benches);
