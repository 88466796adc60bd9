use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use increg::ba::{solve_global, BaProblem, SolverConfig};
use increg::engine::{mst_baseline, run_incremental, EngineConfig};
use increg::geometry::{ransac_rigid, solve_rigid, RansacConfig};
use increg::graph::{build_graph, GraphConfig};
use increg::refine::{GeometricFeature, ScanFeatures};
use increg::tracks::aggregate;
use increg_bench::{correspondences, room, room_graph, room_model, track_observations};

fn geometry(c: &mut Criterion) {
    let (clean, _) = correspondences(1000, 0.0, 1);
    c.bench_function("solve_rigid/1000", |b| b.iter(|| solve_rigid(black_box(&clean))));

    let (noisy, _) = correspondences(500, 0.4, 2);
    let cfg = RansacConfig {
        iterations: 1000,
        inlier_threshold: 0.05,
        seed: 0,
    };
    c.bench_function("ransac_rigid/500x1000", |b| {
        b.iter(|| ransac_rigid(black_box(&noisy), &cfg))
    });

    let obs = track_observations(6, 3);
    c.bench_function("aggregate/6", |b| b.iter(|| aggregate(black_box(&obs))));
}

fn pipeline(c: &mut Criterion) {
    let mut g = c.benchmark_group("room8");
    g.sample_size(10);

    let scene = room(8, 0);
    let sources = scene.graph_sources();
    g.bench_function("build_graph", |b| {
        b.iter(|| build_graph(black_box(&sources), &GraphConfig::default()))
    });

    let (_, graph) = room_graph(8, 0);
    g.bench_function("run_incremental", |b| {
        b.iter(|| run_incremental(black_box(&graph), &EngineConfig::default()))
    });
    g.bench_function("mst_baseline", |b| b.iter(|| mst_baseline(black_box(&graph))));

    let (_, model) = room_model(8, 0);
    let problem = BaProblem::from_tracks(&model.tracks, &model.poses, model.anchor());
    g.bench_function("solve_global", |b| {
        b.iter_batched(
            || problem.clone(),
            |mut p| solve_global(&mut p, &SolverConfig::global()),
            BatchSize::LargeInput,
        )
    });

    let feature = GeometricFeature::default();
    g.bench_function("scan_features", |b| {
        b.iter(|| ScanFeatures::new(black_box(&scene.clouds[0]), &feature))
    });
    g.finish();
}

criterion_group!(benches, geometry, pipeline);
criterion_main!(benches);
