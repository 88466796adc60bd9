//! Track refinement for detector-free matchers.
//!
//! Dense matches carry no repeatable keypoints, so the same surface point
//! shows up at slightly different places in different pairs. Snapping match
//! endpoints to a per-scan voxel grid gives fixed keypoints and a coarse
//! model. Each track's observations are then moved to the point of their
//! local patch that best agrees, feature-wise, with a randomly chosen
//! reference patch, and a global BA re-solves poses and landmarks.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ba::{energy, solve_global, BaProblem, Loss, SolverConfig, Termination};
use crate::cloud::PointCloud;
use crate::engine::{run_incremental_with_report, EngineConfig, RegistrationModel, RunOutcome, Stage};
use crate::error::{Error, Result};
use crate::geometry::{rotation_distance, Point3, RigidTransform};
use crate::graph::{build_graph, GraphConfig, GraphSources, KeypointSet, MatchSet};
use crate::spatial::{voxel_key, KdTree, VoxelKey};
use crate::tracks::{aggregate, Track, TrackId};

/// Dense correspondences per scan pair, in the two scans' local frames.
pub type DenseMatches = BTreeMap<(usize, usize), Vec<(Point3, Point3)>>;

/// Fixed keypoints and the matches between them.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMatches {
    pub keypoints: Vec<KeypointSet>,
    pub matches: BTreeMap<(usize, usize), MatchSet>,
}

/// Snaps every match endpoint to its scan's voxel cell. A cell becomes one
/// keypoint located at the mean of all endpoints that fell into it, so a
/// location hit by several pairs keeps a single id. Keypoint ids follow the
/// sorted cell keys; repeated pairs collapse.
pub fn quantize_matches(dense: &DenseMatches, scans: usize, cell: f64) -> Result<QuantizedMatches> {
    if !(cell > 0.0 && cell.is_finite()) {
        return Err(Error::InvalidConfig(format!("cell size must be > 0, got {cell}")));
    }
    let mut cells: Vec<BTreeMap<VoxelKey, (Point3, usize)>> = vec![BTreeMap::new(); scans];
    for (&(i, j), pairs) in dense {
        if i >= scans || j >= scans || i == j {
            return Err(Error::InvalidInput(format!("bad scan pair ({i}, {j})")));
        }
        for (a, b) in pairs {
            for (s, p) in [(i, a), (j, b)] {
                let e = cells[s].entry(voxel_key(p, cell)).or_insert((Point3::zeros(), 0));
                e.0 += p;
                e.1 += 1;
            }
        }
    }
    let ids: Vec<BTreeMap<VoxelKey, usize>> = cells
        .iter()
        .map(|c| c.keys().enumerate().map(|(n, k)| (*k, n)).collect())
        .collect();
    let keypoints = cells
        .iter()
        .map(|c| KeypointSet::positions_only(c.values().map(|(sum, n)| sum / *n as f64).collect()))
        .collect();
    let mut matches = BTreeMap::new();
    for (&(i, j), pairs) in dense {
        let set: BTreeSet<(usize, usize)> = pairs
            .iter()
            .map(|(a, b)| (ids[i][&voxel_key(a, cell)], ids[j][&voxel_key(b, cell)]))
            .collect();
        if set.is_empty() {
            continue;
        }
        let m = MatchSet::new((i, j), set.into_iter().collect(), None)?.canonical();
        match matches.entry(m.edge) {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(m);
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                let merged: BTreeSet<(usize, usize)> = o.get().pairs.iter().chain(&m.pairs).copied().collect();
                o.get_mut().pairs = merged.into_iter().collect();
            }
        }
    }
    Ok(QuantizedMatches { keypoints, matches })
}

/// Graph and engine settings whose geometric tolerances admit quantisation
/// error of one cell diagonal.
pub fn coarse_configs(cell: f64, graph: &GraphConfig, engine: &EngineConfig) -> (GraphConfig, EngineConfig) {
    let diag = cell * 3f64.sqrt();
    let mut g = graph.clone();
    g.ransac.inlier_threshold = g.ransac.inlier_threshold.max(diag);
    let mut e = engine.clone();
    e.ransac.inlier_threshold = e.ransac.inlier_threshold.max(diag);
    e.tracks.admission_threshold = e.tracks.admission_threshold.max(diag);
    e.tracks.filter_threshold = e.tracks.filter_threshold.max(diag);
    e.cluster_translation = e.cluster_translation.max(2.0 * diag);
    (g, e)
}

/// Runs the incremental engine on quantised matches and tags the models coarse.
pub fn build_coarse_model(
    clouds: &[PointCloud],
    quantized: &QuantizedMatches,
    overlap: Option<DMatrix<f64>>,
    graph: &GraphConfig,
    engine: &EngineConfig,
) -> Result<RunOutcome> {
    if quantized.keypoints.len() != clouds.len() {
        return Err(Error::DimensionMismatch {
            left: quantized.keypoints.len(),
            right: clouds.len(),
        });
    }
    let sources = GraphSources {
        clouds: clouds.to_vec(),
        keypoints: Some(quantized.keypoints.clone()),
        matches: Some(quantized.matches.clone()),
        overlap,
    };
    let g = build_graph(&sources, graph)?;
    let mut out = run_incremental_with_report(&g, engine)?;
    for m in &mut out.models {
        m.stage = Stage::Coarse;
    }
    Ok(out)
}

/// Per-point descriptor used for patch voting.
pub trait PointFeature: Send + Sync {
    fn dim(&self) -> usize;
    fn compute(&self, tree: &KdTree, index: usize) -> Vec<f64>;
}

/// Multi-scale covariance shape (linearity, planarity, scattering) plus the
/// point's offset from its neighbourhood centroid, in-plane and along the
/// normal. Invariant to rigid motion.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricFeature {
    pub scales: Vec<f64>,
}

impl Default for GeometricFeature {
    fn default() -> Self {
        Self {
            scales: vec![0.1, 0.2, 0.3],
        }
    }
}

const PER_SCALE: usize = 5;

impl PointFeature for GeometricFeature {
    fn dim(&self) -> usize {
        PER_SCALE * self.scales.len()
    }

    fn compute(&self, tree: &KdTree, index: usize) -> Vec<f64> {
        let p = tree.point(index);
        let mut out = Vec::with_capacity(self.dim());
        let widest = self.scales.iter().copied().fold(0.0, f64::max);
        let all = tree.within(p, widest);
        for &r in &self.scales {
            let nbrs = &all[..all.partition_point(|(_, d2)| *d2 <= r * r)];
            if nbrs.len() < 3 {
                out.extend([0.0; PER_SCALE]);
                continue;
            }
            let c = nbrs.iter().map(|(i, _)| tree.point(*i)).sum::<Point3>() / nbrs.len() as f64;
            let cov = nbrs.iter().fold(Matrix3::zeros(), |acc, (i, _)| {
                let d = tree.point(*i) - c;
                acc + d * d.transpose()
            }) / nbrs.len() as f64;
            let eig = SymmetricEigen::new(cov);
            let mut order = [0, 1, 2];
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let l = order.map(|k| eig.eigenvalues[k].max(0.0));
            let normal = eig.eigenvectors.column(order[2]);
            let off = p - c;
            if l[0] <= 0.0 {
                out.extend([0.0; PER_SCALE]);
                continue;
            }
            let along = off.dot(&normal);
            out.extend([
                (l[0] - l[1]) / l[0],
                (l[1] - l[2]) / l[0],
                l[2] / l[0],
                (off.norm_squared() - along * along).max(0.0).sqrt() / r,
                along.abs() / r,
            ]);
        }
        out
    }
}

/// The same feature everywhere, so every similarity ties.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UniformFeature;

impl PointFeature for UniformFeature {
    fn dim(&self) -> usize {
        1
    }

    fn compute(&self, _: &KdTree, _: usize) -> Vec<f64> {
        vec![1.0]
    }
}

/// A scan with its search tree and unit-normalised per-point features.
#[derive(Clone, Debug)]
pub struct ScanFeatures {
    tree: KdTree,
    features: Vec<Vec<f64>>,
}

impl ScanFeatures {
    pub fn new(cloud: &PointCloud, feature: &dyn PointFeature) -> Self {
        let tree = KdTree::new(&cloud.points);
        let features = (0..tree.len())
            .into_par_iter()
            .map(|i| normalized(feature.compute(&tree, i)))
            .collect();
        Self { tree, features }
    }

    pub fn tree(&self) -> &KdTree {
        &self.tree
    }

    pub fn feature(&self, index: usize) -> &[f64] {
        &self.features[index]
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 && n.is_finite() {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    v
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `k` points around a keypoint with their features.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub center: Point3,
    pub radius: f64,
    pub indices: Vec<usize>,
    pub points: Vec<Point3>,
    pub features: Vec<Vec<f64>>,
    /// Fewer than `k` points lay within the radius; the nearest was repeated.
    pub padded: bool,
}

impl Patch {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn extract_patch(scan: &ScanFeatures, center: &Point3, k: usize, radius: f64) -> Result<Patch> {
    let mut nbrs = scan.tree.knn_within(center, k, radius);
    if nbrs.is_empty() || k == 0 {
        return Err(Error::EmptyNeighborhood { radius });
    }
    let padded = nbrs.len() < k;
    let nearest = nbrs[0];
    nbrs.resize(k, nearest);
    Ok(Patch {
        center: *center,
        radius,
        indices: nbrs.iter().map(|(i, _)| *i).collect(),
        points: nbrs.iter().map(|(i, _)| *scan.tree.point(*i)).collect(),
        features: nbrs.iter().map(|(i, _)| scan.features[*i].clone()).collect(),
        padded,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineConfig {
    pub k: usize,
    pub radius: f64,
    /// Feature neighbours summed when scoring reference points.
    pub score_neighbors: usize,
    /// Spatial neighbours averaged into a refined keypoint.
    pub spatial_neighbors: usize,
    pub seed: u64,
    pub repeat: usize,
    pub solver: SolverConfig,
    pub loss: Loss,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            k: 64,
            radius: 0.3,
            score_neighbors: 3,
            spatial_neighbors: 3,
            seed: 0,
            repeat: 1,
            solver: SolverConfig::global(),
            loss: Loss::Squared,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinedTrack {
    pub track: TrackId,
    pub landmark: Point3,
    /// `(scan, refined point)` in the track's observation order.
    pub observations: Vec<(usize, Point3)>,
    pub reference: usize,
    /// Similarities carried no information; the original points were kept.
    pub degenerate: bool,
    /// The vote spread the observations further apart; the original points
    /// were kept.
    pub rejected: bool,
}

const FLAT: f64 = 1e-12;

/// Mean of patch point `i` and its `s` nearest distinct neighbours in the patch.
fn local_mean(patch: &Patch, i: usize, s: usize) -> Point3 {
    let p = patch.points[i];
    let mut others: Vec<(f64, usize)> = patch
        .indices
        .iter()
        .enumerate()
        .filter(|(_, idx)| **idx != patch.indices[i])
        .map(|(n, _)| ((patch.points[n] - p).norm_squared(), n))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut seen = BTreeSet::from([patch.indices[i]]);
    let mut sum = p;
    let mut count = 1.0;
    for (_, n) in others {
        if seen.len() > s {
            break;
        }
        if seen.insert(patch.indices[n]) {
            sum += patch.points[n];
            count += 1.0;
        }
    }
    sum / count
}

fn argmax(values: &[f64]) -> Option<usize> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(*v), hi.max(*v))
    });
    let spread = hi - lo;
    if spread.is_nan() || spread <= FLAT {
        return None;
    }
    values.iter().position(|v| *v == hi)
}

/// Votes for a common point across a track's patches.
///
/// A reference patch is drawn at random; each of its points scores the sum
/// of its `score_neighbors` best similarities in every other patch, and the
/// winner is the point the patches agree on best. Every other patch moves to
/// its point most similar to the winner. Refined keypoints average the chosen
/// point with its nearest neighbours, and the landmark is re-aggregated.
/// A vote that leaves the observations more spread out in the world frame
/// than before is discarded.
pub fn refine_track(
    id: TrackId,
    track: &Track,
    patches: &[Patch],
    poses: &BTreeMap<usize, RigidTransform>,
    config: &RefineConfig,
    seed: u64,
) -> Result<RefinedTrack> {
    let n = track.observations.len();
    if n < 2 || patches.len() != n || patches.iter().any(Patch::is_empty) {
        return Err(Error::InvalidInput(format!(
            "track {id} needs two or more observations with patches"
        )));
    }
    let pose_of = |s: usize| {
        poses
            .get(&s)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("scan {s} has no pose")))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(0..n);
    let reference = &patches[r];
    let m = config.score_neighbors.max(1);
    let scores: Vec<f64> = reference
        .features
        .iter()
        .map(|f| {
            patches
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != r)
                .map(|(_, other)| {
                    let mut sims: Vec<f64> = other.features.iter().map(|g| cosine(f, g)).collect();
                    sims.sort_by(|a, b| b.total_cmp(a));
                    sims.iter().take(m).sum::<f64>()
                })
                .sum()
        })
        .collect();

    let original: Vec<(usize, Point3)> = track.observations.iter().map(|o| (o.scan, o.point)).collect();
    let keep = |degenerate, rejected| RefinedTrack {
        track: id,
        landmark: track.landmark,
        observations: original.clone(),
        reference: r,
        degenerate,
        rejected,
    };
    let Some(winner) = argmax(&scores) else {
        return Ok(keep(true, false));
    };
    let wf = &reference.features[winner];
    let mut refined = Vec::with_capacity(n);
    let mut degenerate = false;
    for (i, (o, patch)) in track.observations.iter().zip(patches).enumerate() {
        let chosen = if i == r {
            Some(winner)
        } else {
            let sims: Vec<f64> = patch.features.iter().map(|g| cosine(wf, g)).collect();
            argmax(&sims)
        };
        let p = match chosen {
            Some(c) => local_mean(patch, c, config.spatial_neighbors),
            None => {
                degenerate = true;
                o.point
            }
        };
        refined.push((o.scan, p));
    }
    let obs: Vec<(Point3, RigidTransform)> = refined
        .iter()
        .map(|(s, p)| pose_of(*s).map(|t| (*p, t)))
        .collect::<Result<_>>()?;
    let before: Vec<(Point3, RigidTransform)> = original
        .iter()
        .map(|(s, p)| pose_of(*s).map(|t| (*p, t)))
        .collect::<Result<_>>()?;
    if world_spread(&obs) > world_spread(&before) {
        return Ok(keep(degenerate, true));
    }
    Ok(RefinedTrack {
        track: id,
        landmark: aggregate(&obs)?.landmark,
        observations: refined,
        reference: r,
        degenerate,
        rejected: false,
    })
}

/// Sum of squared distances of world-frame points from their mean.
fn world_spread(obs: &[(Point3, RigidTransform)]) -> f64 {
    let w: Vec<Point3> = obs.iter().map(|(p, t)| t.apply_inverse(p)).collect();
    let mean = w.iter().sum::<Point3>() / w.len() as f64;
    w.iter().map(|p| (p - mean).norm_squared()).sum()
}

fn track_seed(seed: u64, id: TrackId) -> u64 {
    seed ^ (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RefineReport {
    pub refined: usize,
    pub degenerate: usize,
    pub rejected: usize,
    pub skipped: usize,
    /// Energy of the coarse model before refinement.
    pub coarse_energy: f64,
    /// Energy of the refined problem before and after global BA.
    pub initial_energy: f64,
    pub final_energy: f64,
    pub iterations: usize,
    pub termination: Option<Termination>,
    /// Per scan `(rotation change in radians, centre displacement)`.
    pub pose_deltas: BTreeMap<usize, (f64, f64)>,
}

/// Refines every active track of `model` and re-runs global BA.
/// `scans` is indexed by scan id.
pub fn refine_model(
    model: &RegistrationModel,
    scans: &[ScanFeatures],
    config: &RefineConfig,
) -> Result<(RegistrationModel, RefineReport)> {
    let anchor = model
        .anchor()
        .ok_or_else(|| Error::InvalidInput("cannot refine an empty model".into()))?;
    if let Some(s) = model.poses.keys().find(|s| **s >= scans.len()) {
        return Err(Error::InvalidInput(format!("no scan data for scan {s}")));
    }
    let mut out = model.clone();
    let mut report = RefineReport {
        coarse_energy: model.energy(),
        ..Default::default()
    };
    for pass in 0..config.repeat.max(1) {
        let ids: Vec<TrackId> = out.tracks.active().map(|(id, _)| id).collect();
        let results: Vec<Option<RefinedTrack>> = ids
            .par_iter()
            .map(|&id| {
                let t = out.tracks.get(id)?;
                let patches: Vec<Patch> = t
                    .observations
                    .iter()
                    .map(|o| extract_patch(&scans[o.scan], &o.point, config.k, config.radius))
                    .collect::<Result<_>>()
                    .ok()?;
                let seed = track_seed(config.seed.wrapping_add(pass as u64), id);
                refine_track(id, t, &patches, &out.poses, config, seed).ok()
            })
            .collect();
        let (mut refined, mut degenerate, mut rejected, mut skipped) = (0, 0, 0, 0);
        for r in results {
            match r {
                Some(r) => {
                    refined += 1;
                    degenerate += usize::from(r.degenerate);
                    rejected += usize::from(r.rejected);
                    let pts: Vec<Point3> = r.observations.iter().map(|(_, p)| *p).collect();
                    out.tracks.set_observation_points(r.track, &pts);
                    out.tracks.set_landmark(r.track, r.landmark);
                }
                None => skipped += 1,
            }
        }
        let mut problem = BaProblem::from_tracks(&out.tracks, &out.poses, Some(anchor));
        problem.loss = config.loss;
        let initial = energy(&problem);
        let solved = solve_global(&mut problem, &config.solver)?;
        problem.write_back(&mut out.tracks, &mut out.poses);
        if pass == 0 {
            report.initial_energy = initial;
        }
        report.refined = refined;
        report.degenerate = degenerate;
        report.rejected = rejected;
        report.skipped = skipped;
        report.final_energy = solved.final_energy;
        report.iterations += solved.iterations;
        report.termination = Some(solved.termination);
    }
    report.pose_deltas = model
        .poses
        .iter()
        .map(|(s, before)| {
            let after = &out.poses[s];
            (
                *s,
                (
                    rotation_distance(before, after),
                    (before.center() - after.center()).norm(),
                ),
            )
        })
        .collect();
    out.stage = Stage::Refined;
    Ok((out, report))
}
