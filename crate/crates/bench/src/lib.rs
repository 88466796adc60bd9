//! Shared fixtures for the criterion benchmarks.

use increg::engine::{run_incremental, EngineConfig};
use increg::geometry::{so3_exp, CorrespondenceSet, Point3, RigidTransform};
use increg::graph::{build_graph, GraphConfig, ScanGraph};
use increg::synth::{generate_synthetic_scene, SceneConfig, SyntheticScene};
use increg::RegistrationModel;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_transform(rng: &mut impl Rng) -> RigidTransform {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    RigidTransform {
        rotation: so3_exp(&axis),
        translation: Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ),
    }
}

/// `n` pairs under a random motion, the first `outliers` fraction replaced
/// by uniform noise.
pub fn correspondences(n: usize, outliers: f64, seed: u64) -> (CorrespondenceSet, RigidTransform) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = random_transform(&mut rng);
    let bad = (n as f64 * outliers) as usize;
    let cube = |rng: &mut ChaCha8Rng| -> Point3 {
        Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
    };
    let pairs = (0..n)
        .map(|k| {
            let s = cube(&mut rng);
            let t = if k < bad { cube(&mut rng) * 3.0 } else { gt.apply(&s) };
            (s, t)
        })
        .collect();
    (CorrespondenceSet::new(pairs).expect("finite pairs"), gt)
}

/// Observations of one landmark from `views` random poses.
pub fn track_observations(views: usize, seed: u64) -> Vec<(Point3, RigidTransform)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = Vector3::new(
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
    );
    (0..views)
        .map(|_| {
            let pose = random_transform(&mut rng);
            (pose.apply(&q), pose)
        })
        .collect()
}

pub fn room(scans: usize, seed: u64) -> SyntheticScene {
    generate_synthetic_scene(&SceneConfig {
        scans,
        seed,
        ..Default::default()
    })
    .expect("valid scene config")
}

pub fn room_graph(scans: usize, seed: u64) -> (SyntheticScene, ScanGraph) {
    let scene = room(scans, seed);
    let graph = build_graph(&scene.graph_sources(), &GraphConfig::default()).expect("graph builds");
    (scene, graph)
}

pub fn room_model(scans: usize, seed: u64) -> (ScanGraph, RegistrationModel) {
    let (_, graph) = room_graph(scans, seed);
    let mut models = run_incremental(&graph, &EngineConfig::default()).expect("registration runs");
    (graph, models.swap_remove(0))
}
