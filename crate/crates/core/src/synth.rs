//! Seeded synthetic scenes with known poses.
//!
//! A scene is a set of textured surfaces sampled once in the world frame.
//! Every scan sees the world points inside its visibility window, so two
//! scans observe exactly the same physical samples where they overlap. Scan
//! points are `T_i(w) + noise`; keypoints are a fixed random subset of world
//! points with random descriptors shared across scans.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::str::FromStr;

use nalgebra::{DMatrix, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::geometry::{Point3, RigidTransform};
use crate::graph::{GraphSources, KeypointSet, MatchSet};
use crate::refine::DenseMatches;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Room,
    Facade,
    Chain,
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "room" => Ok(Self::Room),
            "facade" => Ok(Self::Facade),
            "chain" => Ok(Self::Chain),
            other => Err(Error::InvalidConfig(format!("unknown scene type `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub kind: SceneKind,
    pub scans: usize,
    /// Fraction of a scan's window shared with its successor.
    pub overlap: f64,
    /// Per-coordinate Gaussian point noise (m).
    pub noise: f64,
    /// Fraction of injected wrong matches per scan pair.
    pub outlier_rate: f64,
    pub seed: u64,
    /// Independent sub-scenes, 100 m apart.
    pub groups: usize,
    /// Surface sampling distance (m).
    pub spacing: f64,
    /// World keypoints per sub-scene.
    pub keypoints: usize,
    pub descriptor_dim: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            kind: SceneKind::Room,
            scans: 8,
            overlap: 0.7,
            noise: 0.0,
            outlier_rate: 0.0,
            seed: 0,
            groups: 1,
            spacing: 0.05,
            keypoints: 2400,
            descriptor_dim: 32,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.groups == 0 {
            return bad("at least one group is required");
        }
        if self.scans < 2 * self.groups {
            return bad("every group needs at least two scans");
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad("overlap must lie in [0, 1)");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return bad("outlier rate must lie in [0, 1)");
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return bad("spacing must be > 0");
        }
        if self.descriptor_dim == 0 {
            return bad("descriptor dimension must be > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub clouds: Vec<PointCloud>,
    pub ground_truth: GroundTruth,
    pub keypoints: Vec<KeypointSet>,
    /// Ground-truth matches plus injected outliers, keyed by `(i, j)`, `i < j`.
    pub matches: BTreeMap<(usize, usize), MatchSet>,
    /// Shared-point fraction `|S_i ∩ S_j| / min(|S_i|, |S_j|)`.
    pub overlap: DMatrix<f64>,
    /// World sample index of every cloud point, ascending.
    pub point_ids: Vec<Vec<usize>>,
    /// World sample index of every keypoint, ascending.
    pub keypoint_ids: Vec<Vec<usize>>,
    pub group: Vec<usize>,
    pub world: Vec<Point3>,
}

impl SyntheticScene {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    /// Clouds, keypoints, matches and overlap scores for graph construction.
    pub fn graph_sources(&self) -> GraphSources {
        GraphSources {
            clouds: self.clouds.clone(),
            keypoints: Some(self.keypoints.clone()),
            matches: Some(self.matches.clone()),
            overlap: Some(self.overlap.clone()),
        }
    }

    /// Cloud index in scan `s` of world sample `w`.
    pub fn point_index(&self, s: usize, w: usize) -> Option<usize> {
        self.point_ids[s].binary_search(&w).ok()
    }

    /// [`Self::dense_matches`] for every pair that has keypoint matches.
    pub fn dense_match_set(&self, count: usize, seed: u64) -> DenseMatches {
        self.matches
            .keys()
            .map(|&(i, j)| ((i, j), self.dense_matches(i, j, count, seed)))
            .filter(|(_, m)| !m.is_empty())
            .collect()
    }

    /// Cloud points of `i` paired with the same physical sample in `j`;
    /// at most `count` pairs, drawn at random from the overlap. These play
    /// the part of a detector-free matcher's output.
    pub fn dense_matches(&self, i: usize, j: usize, count: usize, seed: u64) -> Vec<(Point3, Point3)> {
        let shared: Vec<(usize, usize)> = self.point_ids[i]
            .iter()
            .enumerate()
            .filter_map(|(a, w)| self.point_index(j, *w).map(|b| (a, b)))
            .collect();
        if shared.is_empty() {
            return Vec::new();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64) << 32) ^ j as u64);
        let mut idx = sample(&mut rng, shared.len(), count.min(shared.len())).into_vec();
        idx.sort_unstable();
        idx.into_iter()
            .map(|k| {
                let (a, b) = shared[k];
                (self.clouds[i].points[a], self.clouds[j].points[b])
            })
            .collect()
    }
}

/// A planar patch `origin + s u + t v + h(s, t) n` with sinusoidal relief.
struct Face {
    origin: Point3,
    u: Vector3<f64>,
    v: Vector3<f64>,
    size: (f64, f64),
    relief: Vec<[f64; 4]>,
}

impl Face {
    fn new(origin: Point3, u: Vector3<f64>, v: Vector3<f64>, size: (f64, f64)) -> Self {
        Self {
            origin,
            u,
            v,
            size,
            relief: Vec::new(),
        }
    }

    fn normal(&self) -> Vector3<f64> {
        self.u.cross(&self.v)
    }

    fn textured(mut self, rng: &mut impl Rng, amplitude: f64) -> Self {
        for _ in 0..4 {
            self.relief.push([
                rng.random_range(0.3..1.0) * amplitude,
                rng.random_range(-6.0..6.0),
                rng.random_range(-6.0..6.0),
                rng.random_range(0.0..TAU),
            ]);
        }
        self
    }

    fn height(&self, s: f64, t: f64) -> f64 {
        self.relief
            .iter()
            .map(|[a, fu, fv, ph]| a * (fu * s + fv * t + ph).sin())
            .sum()
    }

    /// Jittered grid samples.
    fn sample(&self, spacing: f64, rng: &mut impl Rng, out: &mut Vec<Point3>) {
        let nu = (self.size.0 / spacing).ceil().max(1.0) as usize;
        let nv = (self.size.1 / spacing).ceil().max(1.0) as usize;
        let (du, dv) = (self.size.0 / nu as f64, self.size.1 / nv as f64);
        let n = self.normal();
        for a in 0..nu {
            for b in 0..nv {
                let s = (a as f64 + rng.random_range(0.2..0.8)) * du;
                let t = (b as f64 + rng.random_range(0.2..0.8)) * dv;
                out.push(self.origin + self.u * s + self.v * t + n * self.height(s, t));
            }
        }
    }
}

fn boxes(rng: &mut impl Rng, count: usize, x: (f64, f64), y: (f64, f64), faces: &mut Vec<Face>) {
    for _ in 0..count {
        let (w, d, h) = (
            rng.random_range(0.4..1.0),
            rng.random_range(0.4..1.0),
            rng.random_range(0.3..1.2),
        );
        let o = Vector3::new(rng.random_range(x.0..x.1 - w), rng.random_range(y.0..y.1 - d), 0.0);
        let (ex, ey, ez) = (Vector3::x(), Vector3::y(), Vector3::z());
        faces.push(Face::new(o + ez * h, ex, ey, (w, d)).textured(rng, 0.02));
        faces.push(Face::new(o, ex, ez, (w, h)).textured(rng, 0.02));
        faces.push(Face::new(o + ey * d, ez, ex, (h, w)).textured(rng, 0.02));
        faces.push(Face::new(o, ez, ey, (h, d)).textured(rng, 0.02));
        faces.push(Face::new(o + ex * w, ey, ez, (d, h)).textured(rng, 0.02));
    }
}

/// Surfaces of one sub-scene, the visibility parameter of a point, and the
/// sensor placement for a window centre.
struct Layout {
    faces: Vec<Face>,
    circular: bool,
    centers: Vec<f64>,
    width: f64,
}

const ROOM: (f64, f64, f64) = (6.0, 5.0, 2.5);
const STRIP_WIDTH: f64 = 4.0;
/// Room scans see nothing this close (horizontally) to the room centre, where
/// all windows would otherwise meet.
const BLIND_RADIUS: f64 = 1.0;

fn layout(kind: SceneKind, scans: usize, overlap: f64, rng: &mut impl Rng) -> Layout {
    let (ex, ey, ez) = (Vector3::x(), Vector3::y(), Vector3::z());
    let mut faces = Vec::new();
    match kind {
        SceneKind::Room => {
            let (w, d, h) = ROOM;
            faces.push(Face::new(Vector3::zeros(), ex, ey, (w, d)).textured(rng, 0.03));
            faces.push(Face::new(Vector3::new(0.0, 0.0, h), ey, ex, (d, w)).textured(rng, 0.03));
            faces.push(Face::new(Vector3::zeros(), ez, ex, (h, w)).textured(rng, 0.06));
            faces.push(Face::new(Vector3::new(0.0, d, 0.0), ex, ez, (w, h)).textured(rng, 0.06));
            faces.push(Face::new(Vector3::zeros(), ey, ez, (d, h)).textured(rng, 0.06));
            faces.push(Face::new(Vector3::new(w, 0.0, 0.0), ez, ey, (h, d)).textured(rng, 0.06));
            boxes(rng, 4, (0.3, w - 0.3), (0.3, d - 0.3), &mut faces);
            let step = TAU / scans as f64;
            Layout {
                faces,
                circular: true,
                centers: (0..scans).map(|i| i as f64 * step).collect(),
                width: step / (1.0 - overlap),
            }
        }
        SceneKind::Facade | SceneKind::Chain => {
            let width = STRIP_WIDTH;
            let step = width * (1.0 - overlap);
            let length = width + step * (scans - 1) as f64;
            if kind == SceneKind::Facade {
                faces.push(Face::new(Vector3::zeros(), ex, ez, (length, 6.0)).textured(rng, 0.08));
                faces.push(Face::new(Vector3::new(0.0, -3.0, 0.0), ex, ey, (length, 3.0)).textured(rng, 0.03));
                boxes(
                    rng,
                    (length / 2.0).ceil() as usize,
                    (0.0, length),
                    (-1.5, -0.2),
                    &mut faces,
                );
            } else {
                faces.push(Face::new(Vector3::new(0.0, -1.0, 0.0), ex, ey, (length, 2.0)).textured(rng, 0.03));
                faces.push(Face::new(Vector3::new(0.0, 1.0, 0.0), ex, ez, (length, 2.5)).textured(rng, 0.06));
                faces.push(Face::new(Vector3::new(0.0, -1.0, 0.0), ez, ex, (2.5, length)).textured(rng, 0.06));
                boxes(
                    rng,
                    (length / 3.0).ceil() as usize,
                    (0.0, length),
                    (-0.9, 0.9),
                    &mut faces,
                );
            }
            Layout {
                faces,
                circular: false,
                centers: (0..scans).map(|i| width / 2.0 + i as f64 * step).collect(),
                width,
            }
        }
    }
}

impl Layout {
    fn parameter(&self, p: &Point3) -> f64 {
        if self.circular {
            (p.y - ROOM.1 / 2.0).atan2(p.x - ROOM.0 / 2.0).rem_euclid(TAU)
        } else {
            p.x
        }
    }

    fn visible(&self, p: &Point3, center: f64) -> bool {
        if self.circular && (p.x - ROOM.0 / 2.0).hypot(p.y - ROOM.1 / 2.0) < BLIND_RADIUS {
            return false;
        }
        let u = self.parameter(p);
        let d = if self.circular {
            let d = (u - center).rem_euclid(TAU);
            d.min(TAU - d)
        } else {
            (u - center).abs()
        };
        d <= self.width / 2.0
    }

    /// World position of the sensor and its heading for a window.
    fn sensor(&self, kind: SceneKind, center: f64, rng: &mut impl Rng) -> (Point3, f64) {
        match kind {
            SceneKind::Room => {
                let pos = Vector3::new(
                    ROOM.0 / 2.0 + rng.random_range(-0.5..0.5),
                    ROOM.1 / 2.0 + rng.random_range(-0.5..0.5),
                    rng.random_range(1.2..1.6),
                );
                (pos, center)
            }
            SceneKind::Facade => (Vector3::new(center, -4.0, rng.random_range(1.4..1.8)), PI / 2.0),
            SceneKind::Chain => (
                Vector3::new(center, rng.random_range(-0.3..0.3), rng.random_range(1.2..1.6)),
                0.0,
            ),
        }
    }
}

/// World-to-scan pose of a sensor at `pos` facing `heading` (plus jitter).
fn sensor_pose(pos: &Point3, heading: f64, rng: &mut impl Rng) -> RigidTransform {
    let yaw = heading + rng.random_range(-0.3..0.3);
    let tilt = Vector3::new(rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08), 0.0);
    let scan_to_world = RigidTransform::from_axis_angle(&Vector3::z(), yaw, Vector3::zeros()).rotation
        * RigidTransform::from_axis_angle(&tilt, tilt.norm(), Vector3::zeros()).rotation;
    let rotation = scan_to_world.transpose();
    RigidTransform {
        rotation,
        translation: -(rotation * pos),
    }
}

fn sorted_intersection(a: &[usize], b: &[usize]) -> Vec<(usize, usize)> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push((i, j));
                i += 1;
                j += 1;
            }
        }
    }
    out
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn generate_synthetic_scene(config: &SceneConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let mut geo = stream(config.seed, 0);
    let mut noise_rng = stream(config.seed, 1);
    let mut outlier_rng = stream(config.seed, 2);
    let mut desc_rng = stream(config.seed, 3);
    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let per_group: Vec<usize> = (0..config.groups)
        .map(|g| config.scans / config.groups + usize::from(g < config.scans % config.groups))
        .collect();

    let mut world = Vec::new();
    let mut world_keypoint = Vec::new();
    let mut descriptors: Vec<Option<Vec<f64>>> = Vec::new();
    let mut poses = BTreeMap::new();
    let mut point_ids = Vec::new();
    let mut group = Vec::new();
    for (g, &n) in per_group.iter().enumerate() {
        let lay = layout(config.kind, n, config.overlap, &mut geo);
        let offset = Vector3::new(100.0 * g as f64, 0.0, 0.0);
        let mut local = Vec::new();
        for f in &lay.faces {
            f.sample(config.spacing, &mut geo, &mut local);
        }
        let base = world.len();
        let kp: Vec<usize> = {
            let mut k = sample(&mut geo, local.len(), config.keypoints.min(local.len())).into_vec();
            k.sort_unstable();
            k
        };
        let mut is_kp = vec![false; local.len()];
        for k in kp {
            is_kp[k] = true;
        }
        for (k, p) in local.iter().enumerate() {
            world.push(p + offset);
            world_keypoint.push(is_kp[k]);
            descriptors.push(is_kp[k].then(|| {
                let v: Vec<f64> = (0..config.descriptor_dim).map(|_| unit.sample(&mut desc_rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            }));
        }
        for &c in &lay.centers {
            let scan = poses.len();
            let (pos, heading) = lay.sensor(config.kind, c, &mut geo);
            let pose = sensor_pose(&(pos + offset), heading, &mut geo);
            poses.insert(scan, pose);
            let ids: Vec<usize> = (0..local.len())
                .filter(|&k| lay.visible(&local[k], c))
                .map(|k| base + k)
                .collect();
            point_ids.push(ids);
            group.push(g);
        }
    }

    let mut clouds = Vec::with_capacity(point_ids.len());
    let mut keypoints = Vec::with_capacity(point_ids.len());
    let mut keypoint_ids = Vec::with_capacity(point_ids.len());
    for (s, ids) in point_ids.iter().enumerate() {
        if ids.is_empty() {
            return Err(Error::InvalidConfig(format!("scan {s} sees no surface")));
        }
        let pose = poses[&s];
        let pts: Vec<Point3> = ids
            .iter()
            .map(|&w| {
                let p: Point3 = pose.apply(&world[w]);
                if config.noise > 0.0 {
                    p + Vector3::new(
                        noise.sample(&mut noise_rng),
                        noise.sample(&mut noise_rng),
                        noise.sample(&mut noise_rng),
                    )
                } else {
                    p
                }
            })
            .collect();
        let (mut kp_pos, mut kp_desc, mut kp_ids) = (Vec::new(), Vec::new(), Vec::new());
        for (k, &w) in ids.iter().enumerate() {
            if world_keypoint[w] {
                kp_pos.push(pts[k]);
                kp_desc.push(descriptors[w].clone().expect("keypoint descriptor"));
                kp_ids.push(w);
            }
        }
        keypoints.push(KeypointSet::new(kp_pos, kp_desc)?);
        keypoint_ids.push(kp_ids);
        clouds.push(PointCloud::new(pts)?);
    }

    let n = clouds.len();
    let mut overlap = DMatrix::zeros(n, n);
    let mut matches = BTreeMap::new();
    for i in 0..n {
        for j in i + 1..n {
            if group[i] != group[j] {
                continue;
            }
            let shared = sorted_intersection(&point_ids[i], &point_ids[j]).len();
            let score = shared as f64 / point_ids[i].len().min(point_ids[j].len()) as f64;
            overlap[(i, j)] = score;
            overlap[(j, i)] = score;
            let inliers = sorted_intersection(&keypoint_ids[i], &keypoint_ids[j]);
            if inliers.len() < 3 {
                continue;
            }
            let mut pairs = inliers.clone();
            let wanted = (inliers.len() as f64 * config.outlier_rate / (1.0 - config.outlier_rate)).round() as usize;
            let mut taken: std::collections::BTreeSet<(usize, usize)> = pairs.iter().copied().collect();
            let (na, nb) = (keypoint_ids[i].len(), keypoint_ids[j].len());
            let mut added = 0;
            let mut attempts = 0;
            while added < wanted && attempts < 100 * wanted.max(1) {
                attempts += 1;
                let pair = (outlier_rng.random_range(0..na), outlier_rng.random_range(0..nb));
                if keypoint_ids[i][pair.0] == keypoint_ids[j][pair.1] || !taken.insert(pair) {
                    continue;
                }
                pairs.push(pair);
                added += 1;
            }
            matches.insert((i, j), MatchSet::new((i, j), pairs, None)?);
        }
    }

    Ok(SyntheticScene {
        clouds,
        ground_truth: GroundTruth { poses },
        keypoints,
        matches,
        overlap,
        point_ids,
        keypoint_ids,
        group,
        world,
    })
}
