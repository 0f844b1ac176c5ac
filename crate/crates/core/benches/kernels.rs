//! Sequential (one worker) against the default rayon pool for the kernels that
//! fan out per target or per view. Build with `--no-default-features` to bench
//! the plain-iterator fallback, where both variants run the same code.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tig_core::distill::bev_distill_loss;
use tig_core::harness::gradcheck::{check_term, GradTerm};
use tig_core::harness::{HarnessConfig, SceneProblem};
use tig_core::par;
use tig_core::scenegen::{generate_scene, render_gt_views};

const VARIANTS: [(&str, usize); 2] = [("sequential", 1), ("parallel", 0)];

fn kernels(c: &mut Criterion) {
    let cfg = HarnessConfig::default();
    let scene = generate_scene(&cfg.scene).unwrap();
    let problem = SceneProblem::new(scene.clone(), &cfg).unwrap();
    let student = problem.initial_student(&cfg).unwrap();
    let mut gc = cfg.clone();
    gc.gradcheck.instances = 10;

    let mut group = c.benchmark_group("kernels");
    group.sample_size(10);
    for (name, threads) in VARIANTS {
        group.bench_function(BenchmarkId::new("bev_distill_loss", name), |b| {
            b.iter(|| {
                par::with_threads(threads, || {
                    bev_distill_loss(&student.bev, &scene.teacher_bev, &scene.boxes, &problem.distill_opts).unwrap()
                })
            })
        });
        group.bench_function(BenchmarkId::new("render_gt_views", name), |b| {
            b.iter(|| par::with_threads(threads, || render_gt_views(&scene).unwrap()))
        });
        group.bench_function(BenchmarkId::new("evaluate", name), |b| {
            b.iter(|| par::with_threads(threads, || problem.evaluate(&student).unwrap()))
        });
        group.bench_function(BenchmarkId::new("gradcheck_bev", name), |b| {
            b.iter(|| par::with_threads(threads, || check_term(GradTerm::BevDistill, &gc).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
