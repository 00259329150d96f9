//! Parallel vs sequential throughput on the crate's data-parallel
//! workloads: scene generation, gradient-check trials, and multi-seed
//! training cells. Build with default features to exercise rayon; the
//! `*_seq` entry points are always sequential.

use criterion::{criterion_group, criterion_main, Criterion};
use gpa_core::config::{ExperimentConfig, FlatConfig};
use gpa_core::exec;
use gpa_core::experiment::train_run;
use gpa_core::sim::{build_domain_pair, generate_scene, WorldParams};
use gpa_core::rand::SeedableRng;
use gpa_core::rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn bench_world() -> WorldParams {
    let cfg = ExperimentConfig::from_flat(FlatConfig::empty()).unwrap();
    cfg.world
}

fn scene_generation(c: &mut Criterion) {
    let (spec, _) = build_domain_pair(&bench_world(), 7).unwrap();
    let gen = |i: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        rng.set_stream(i as u64);
        generate_scene(&spec, &mut rng).unwrap().proposals.len()
    };
    let mut group = c.benchmark_group("scene_generation_256");
    group.bench_function("parallel", |b| {
        b.iter(|| black_box(exec::map_indexed(256, gen)))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(exec::map_indexed_seq(256, gen)))
    });
    group.finish();
}

fn gradcheck_trials(c: &mut Criterion) {
    // run() parallelizes internally through exec; compare one batched
    // parallel invocation against per-trial sequential execution
    let mut group = c.benchmark_group("gradcheck_24_trials");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| black_box(gpa_core::gradcheck::run(16, 8, 3, 1e-5).max_rel_err))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let mut worst = 0.0_f64;
            for i in 0..16 {
                worst = worst.max(gpa_core::gradcheck::run(1, 0, 3 + i, 1e-5).max_rel_err);
            }
            for i in 0..8 {
                worst = worst.max(gpa_core::gradcheck::run(0, 1, 100 + i, 1e-5).max_rel_err);
            }
            black_box(worst)
        })
    });
    group.finish();
}

fn multi_seed_training(c: &mut Criterion) {
    let flat = FlatConfig::parse(
        "sim.train_scenes = 8\n\
         sim.eval_scenes = 8\n\
         train.epochs = 3\n",
    )
    .unwrap();
    let cfg = ExperimentConfig::from_flat(flat).unwrap();
    let cell = |i: usize| {
        let run = train_run(&cfg, 1 + i as u64).unwrap();
        run.per_epoch.last().unwrap().1.tgt_accuracy
    };
    let mut group = c.benchmark_group("training_8_seeds");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| black_box(exec::map_indexed(8, cell)))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(exec::map_indexed_seq(8, cell)))
    });
    group.finish();
}

criterion_group!(benches, scene_generation, gradcheck_trials, multi_seed_training);
criterion_main!(benches);
