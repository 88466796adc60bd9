//! Tracks: world landmarks aggregated from keypoint observations in several
//! registered scans, and their create / continue / filter life cycle.
//!
//! A landmark `q` observed at scan-local points `p_i` under poses `(R_i, t_i)`
//! solves the stacked system `p_i − (R_i q + t_i) = 0` in the least-squares
//! sense. Since every `R_i` is orthonormal the normal equations collapse to
//! `q = (1/n) Σ R_iᵀ (p_i − t_i)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Point3, RigidTransform};

pub type TrackId = usize;

/// Scan id → world-to-scan pose.
pub type PoseMap = BTreeMap<usize, RigidTransform>;

/// One keypoint of one scan, with its scan-local position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub scan: usize,
    pub keypoint: usize,
    pub point: Point3,
}

impl Observation {
    pub fn new(scan: usize, keypoint: usize, point: Point3) -> Self {
        Self { scan, keypoint, point }
    }

    pub fn key(&self) -> (usize, usize) {
        (self.scan, self.keypoint)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackStatus {
    Active,
    Filtered,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub landmark: Point3,
    pub observations: Vec<Observation>,
    pub status: TrackStatus,
}

impl Track {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn is_active(&self) -> bool {
        self.status == TrackStatus::Active
    }

    pub fn observes(&self, scan: usize) -> bool {
        self.observations.iter().any(|o| o.scan == scan)
    }

    /// Per-observation residual `‖R_i q + t_i − p_i‖`; unposed scans yield `None`.
    pub fn residuals(&self, poses: &PoseMap) -> Vec<Option<f64>> {
        self.observations
            .iter()
            .map(|o| poses.get(&o.scan).map(|t| residual(&self.landmark, t, &o.point)))
            .collect()
    }

    pub fn max_residual(&self, poses: &PoseMap) -> f64 {
        self.residuals(poses)
            .into_iter()
            .map(|r| r.unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }

    /// Observations mapped into the world frame.
    pub fn world_points(&self, poses: &PoseMap) -> Vec<Point3> {
        self.observations
            .iter()
            .filter_map(|o| poses.get(&o.scan).map(|t| t.apply_inverse(&o.point)))
            .collect()
    }
}

#[inline]
pub fn residual(q: &Point3, pose: &RigidTransform, p: &Point3) -> f64 {
    (pose.apply(q) - p).norm()
}

/// Landmark and per-observation residuals from [`aggregate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub landmark: Point3,
    pub residuals: Vec<f64>,
}

/// Closed-form least-squares landmark from `(scan-local point, pose)` pairs.
pub fn aggregate(observations: &[(Point3, RigidTransform)]) -> Result<Aggregate> {
    if observations.is_empty() {
        return Err(Error::InvalidInput("aggregation needs an observation".into()));
    }
    let landmark = observations.iter().map(|(p, t)| t.apply_inverse(p)).sum::<Point3>() / observations.len() as f64;
    let residuals = observations.iter().map(|(p, t)| residual(&landmark, t, p)).collect();
    Ok(Aggregate { landmark, residuals })
}

fn posed<'a>(obs: &'a [Observation], poses: &PoseMap) -> Result<Vec<(Point3, RigidTransform, &'a Observation)>> {
    obs.iter()
        .map(|o| {
            poses
                .get(&o.scan)
                .map(|t| (o.point, *t, o))
                .ok_or_else(|| Error::InvalidInput(format!("scan {} is not registered", o.scan)))
        })
        .collect()
}

fn aggregate_subset(items: &[(Point3, RigidTransform, &Observation)], idx: &[usize]) -> Point3 {
    idx.iter()
        .map(|&k| items[k].1.apply_inverse(&items[k].0))
        .sum::<Point3>()
        / idx.len() as f64
}

/// Indices within `threshold` of `q`, at most one per scan (the lowest residual).
fn consensus(items: &[(Point3, RigidTransform, &Observation)], q: &Point3, threshold: f64) -> (Vec<usize>, f64) {
    let mut per_scan: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (k, (p, t, o)) in items.iter().enumerate() {
        let r = residual(q, t, p);
        if r <= threshold {
            let slot = per_scan.entry(o.scan).or_insert((r, k));
            if r < slot.0 {
                *slot = (r, k);
            }
        }
    }
    let mut idx: Vec<usize> = per_scan.values().map(|&(_, k)| k).collect();
    idx.sort_unstable();
    let sum = per_scan.values().map(|&(r, _)| r).sum();
    (idx, sum)
}

/// Outcome of [`aggregation_ransac`]: indices into the input slice.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationConsensus {
    pub inliers: Vec<usize>,
    pub landmark: Point3,
}

/// Above this many observations hypotheses are drawn at random.
const EXHAUSTIVE_LIMIT: usize = 64;

/// Robust landmark from observations. Each single observation implies a
/// landmark candidate `Rᵀ(p − t)`; the candidate with most observations within
/// `threshold` (one per scan) wins and is re-aggregated on its consensus set.
pub fn aggregation_ransac(
    observations: &[Observation],
    poses: &PoseMap,
    threshold: f64,
    seed: u64,
) -> Result<AggregationConsensus> {
    if observations.len() < 2 {
        return Err(Error::NoConsensus {
            inliers: observations.len(),
        });
    }
    let items = posed(observations, poses)?;
    let hypotheses: Vec<usize> = if items.len() <= EXHAUSTIVE_LIMIT {
        (0..items.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = sample(&mut rng, items.len(), EXHAUSTIVE_LIMIT).into_vec();
        h.sort_unstable();
        h
    };

    let mut best: Option<(Vec<usize>, f64)> = None;
    for h in hypotheses {
        let q = items[h].1.apply_inverse(&items[h].0);
        let (idx, sum) = consensus(&items, &q, threshold);
        let better = match &best {
            None => true,
            Some((b, bs)) => idx.len() > b.len() || (idx.len() == b.len() && sum < *bs),
        };
        if better {
            best = Some((idx, sum));
        }
    }
    let (mut inliers, _) = best.expect("at least one hypothesis");
    let mut landmark = aggregate_subset(&items, &inliers);
    for _ in 0..3 {
        if inliers.len() < 2 {
            break;
        }
        let (next, _) = consensus(&items, &landmark, threshold);
        if next == inliers || next.len() < 2 {
            break;
        }
        inliers = next;
        landmark = aggregate_subset(&items, &inliers);
    }
    // the re-aggregated landmark must still explain every member
    inliers.retain(|&k| residual(&landmark, &items[k].1, &items[k].0) <= threshold);
    if inliers.len() < 2 {
        return Err(Error::NoConsensus { inliers: inliers.len() });
    }
    landmark = aggregate_subset(&items, &inliers);
    Ok(AggregationConsensus { inliers, landmark })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackConfig {
    /// Max residual (m) for an observation to be admitted into a track.
    pub admission_threshold: f64,
    /// Max residual (m) before a track is filtered.
    pub filter_threshold: f64,
    pub min_length: usize,
    pub seed: u64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            admission_threshold: 0.1,
            filter_threshold: 0.1,
            min_length: 2,
            seed: 0,
        }
    }
}

/// All tracks plus the `(scan, keypoint) → track` index over active tracks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackStore {
    tracks: Vec<Track>,
    index: HashMap<(usize, usize), TrackId>,
}

impl TrackStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn get(&self, id: TrackId) -> Option<&Track> {
        self.tracks.get(id)
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn active(&self) -> impl Iterator<Item = (TrackId, &Track)> {
        self.tracks.iter().enumerate().filter(|(_, t)| t.is_active())
    }

    pub fn active_count(&self) -> usize {
        self.active().count()
    }

    pub fn filtered_count(&self) -> usize {
        self.tracks.len() - self.active_count()
    }

    /// Active track owning `(scan, keypoint)`, if any.
    pub fn track_of(&self, scan: usize, keypoint: usize) -> Option<TrackId> {
        self.index.get(&(scan, keypoint)).copied()
    }

    /// Adds an active track, enforcing the observation invariants.
    pub fn insert(&mut self, landmark: Point3, observations: Vec<Observation>) -> Result<TrackId> {
        let scans: BTreeSet<usize> = observations.iter().map(|o| o.scan).collect();
        if scans.len() != observations.len() {
            return Err(Error::InvalidInput("two observations from one scan".into()));
        }
        if scans.len() < 2 {
            return Err(Error::InvalidInput("a track needs two scans".into()));
        }
        if let Some(o) = observations.iter().find(|o| self.index.contains_key(&o.key())) {
            return Err(Error::InvalidInput(format!(
                "keypoint {:?} already belongs to a track",
                o.key()
            )));
        }
        let id = self.tracks.len();
        for o in &observations {
            self.index.insert(o.key(), id);
        }
        self.tracks.push(Track {
            landmark,
            observations,
            status: TrackStatus::Active,
        });
        Ok(id)
    }

    /// Appends a track that is already filtered; it claims no keypoints.
    pub fn insert_filtered(&mut self, landmark: Point3, observations: Vec<Observation>) -> TrackId {
        self.tracks.push(Track {
            landmark,
            observations,
            status: TrackStatus::Filtered,
        });
        self.tracks.len() - 1
    }

    /// Marks a track filtered and releases its keypoints.
    pub fn filter(&mut self, id: TrackId) {
        let Some(t) = self.tracks.get_mut(id) else {
            return;
        };
        if t.status == TrackStatus::Filtered {
            return;
        }
        t.status = TrackStatus::Filtered;
        for o in &t.observations {
            if self.index.get(&o.key()) == Some(&id) {
                self.index.remove(&o.key());
            }
        }
    }

    pub fn set_landmark(&mut self, id: TrackId, landmark: Point3) {
        self.tracks[id].landmark = landmark;
    }

    /// Replaces the observed point of each observation (same scan/keypoint).
    pub fn set_observation_points(&mut self, id: TrackId, points: &[Point3]) {
        for (o, p) in self.tracks[id].observations.iter_mut().zip(points) {
            o.point = *p;
        }
    }

    /// Recomputes every active landmark in closed form from its observations.
    pub fn reaggregate_all(&mut self, poses: &PoseMap) {
        for t in self.tracks.iter_mut().filter(|t| t.is_active()) {
            let obs: Vec<(Point3, RigidTransform)> = t
                .observations
                .iter()
                .filter_map(|o| poses.get(&o.scan).map(|p| (o.point, *p)))
                .collect();
            if let Ok(a) = aggregate(&obs) {
                t.landmark = a.landmark;
            }
        }
    }

    /// Checks the inverted index against the observations.
    pub fn is_consistent(&self) -> bool {
        let mut expected = HashMap::new();
        for (id, t) in self.active() {
            for o in &t.observations {
                if expected.insert(o.key(), id).is_some() {
                    return false;
                }
            }
        }
        expected == self.index
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CreateStats {
    pub created: Vec<TrackId>,
    /// Groups that failed aggregation-RANSAC.
    pub rejected: usize,
    /// Matches skipped because an endpoint already belongs to a track.
    pub conflicts: usize,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Groups matched keypoints transitively and admits one new track per group
/// that passes aggregation-RANSAC.
pub fn create_tracks(
    store: &mut TrackStore,
    poses: &PoseMap,
    matches: &[(Observation, Observation)],
    config: &TrackConfig,
) -> CreateStats {
    let mut stats = CreateStats::default();
    let mut nodes: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut points: Vec<Observation> = Vec::new();
    let mut links = Vec::new();
    for (a, b) in matches {
        if a.scan == b.scan || !poses.contains_key(&a.scan) || !poses.contains_key(&b.scan) {
            continue;
        }
        if store.track_of(a.scan, a.keypoint).is_some() || store.track_of(b.scan, b.keypoint).is_some() {
            stats.conflicts += 1;
            continue;
        }
        let mut id = |o: &Observation| {
            *nodes.entry(o.key()).or_insert_with(|| {
                points.push(*o);
                points.len() - 1
            })
        };
        let (ia, ib) = (id(a), id(b));
        links.push((ia, ib));
    }
    let mut uf = UnionFind::new(points.len());
    for (a, b) in links {
        uf.union(a, b);
    }
    let mut groups: BTreeMap<usize, Vec<Observation>> = BTreeMap::new();
    // iterate in key order so groups and their members are deterministic
    for &node in nodes.values() {
        let root = uf.find(node);
        groups.entry(root).or_default().push(points[node]);
    }
    let mut groups: Vec<Vec<Observation>> = groups.into_values().collect();
    groups.sort_by_key(|g| g.iter().map(Observation::key).min());

    for (g, obs) in groups.into_iter().enumerate() {
        let seed = config.seed ^ (g as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        match aggregation_ransac(&obs, poses, config.admission_threshold, seed) {
            Ok(c) => {
                let members: Vec<Observation> = c.inliers.iter().map(|&k| obs[k]).collect();
                match store.insert(c.landmark, members) {
                    Ok(id) => stats.created.push(id),
                    Err(_) => stats.rejected += 1,
                }
            }
            Err(_) => stats.rejected += 1,
        }
    }
    stats
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContinueStats {
    pub extended: Vec<TrackId>,
    /// Continuations refused by aggregation-RANSAC.
    pub rejected: usize,
    /// Candidates dropped in favour of a lower-residual alternative.
    pub conflicts: usize,
}

/// Appends new-scan observations to existing tracks. A keypoint matching
/// several landmarks (or a landmark matched by several keypoints) keeps only
/// the lowest-residual pairing.
pub fn continue_tracks(
    store: &mut TrackStore,
    poses: &PoseMap,
    candidates: &[(Observation, TrackId)],
    config: &TrackConfig,
) -> ContinueStats {
    let mut stats = ContinueStats::default();
    let mut scored: Vec<(f64, Observation, TrackId)> = Vec::new();
    for &(obs, id) in candidates {
        let Some(pose) = poses.get(&obs.scan) else {
            continue;
        };
        let Some(track) = store.get(id) else { continue };
        if !track.is_active() || track.observes(obs.scan) || store.track_of(obs.scan, obs.keypoint).is_some() {
            continue;
        }
        scored.push((residual(&track.landmark, pose, &obs.point), obs, id));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.key().cmp(&b.1.key())).then(a.2.cmp(&b.2)));
    scored.dedup_by(|a, b| a.1.key() == b.1.key() && a.2 == b.2);

    let mut used_kp = BTreeSet::new();
    let mut used_track = BTreeSet::new();
    for (_, obs, id) in scored {
        if used_kp.contains(&obs.key()) || used_track.contains(&id) {
            stats.conflicts += 1;
            continue;
        }
        used_kp.insert(obs.key());
        used_track.insert(id);

        let track = &store.tracks[id];
        let mut all = track.observations.clone();
        all.push(obs);
        let seed = config.seed ^ (id as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        match aggregation_ransac(&all, poses, config.admission_threshold, seed) {
            Ok(c) if c.inliers.len() == all.len() => {
                let t = &mut store.tracks[id];
                t.observations.push(obs);
                t.landmark = c.landmark;
                store.index.insert(obs.key(), id);
                stats.extended.push(id);
            }
            _ => stats.rejected += 1,
        }
    }
    stats
}

/// Filters active tracks whose largest residual exceeds `max_residual` or
/// that are shorter than `min_length`. Returns the newly filtered ids.
pub fn filter_tracks(store: &mut TrackStore, poses: &PoseMap, max_residual: f64, min_length: usize) -> Vec<TrackId> {
    let doomed: Vec<TrackId> = store
        .active()
        .filter(|(_, t)| t.len() < min_length || t.max_residual(poses) > max_residual)
        .map(|(id, _)| id)
        .collect();
    for &id in &doomed {
        store.filter(id);
    }
    doomed
}

/// Number of distinct active tracks owning any of the given `(scan, keypoint)`
/// endpoints.
pub fn visible_track_count(store: &TrackStore, endpoints: impl IntoIterator<Item = (usize, usize)>) -> usize {
    endpoints
        .into_iter()
        .filter_map(|(s, k)| store.track_of(s, k))
        .collect::<BTreeSet<_>>()
        .len()
}

/// RMS distance of world-frame observations from their track mean, over all
/// observations of all active tracks.
pub fn rms_track_spread(store: &TrackStore, poses: &PoseMap) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (_, t) in store.active() {
        let w = t.world_points(poses);
        if w.len() < 2 {
            continue;
        }
        let mean = w.iter().sum::<Point3>() / w.len() as f64;
        for p in &w {
            sum += (p - mean).norm_squared();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector, Vector3};
    use rand::Rng;

    fn random_pose(rng: &mut impl Rng) -> RigidTransform {
        RigidTransform::from_axis_angle(
            &Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
            rng.random_range(0.0..3.0),
            Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ),
        )
    }

    /// Generic least squares on the stacked 3n×3 system `R_i q = p_i − t_i`.
    fn stacked_lstsq(obs: &[(Point3, RigidTransform)]) -> Point3 {
        let n = obs.len();
        let mut a = DMatrix::zeros(3 * n, 3);
        let mut b = DVector::zeros(3 * n);
        for (k, (p, t)) in obs.iter().enumerate() {
            a.view_mut((3 * k, 0), (3, 3)).copy_from(&t.rotation);
            b.rows_mut(3 * k, 3).copy_from(&(p - t.translation));
        }
        let x = a.svd(true, true).solve(&b, 1e-14).unwrap();
        Vector3::new(x[0], x[1], x[2])
    }

    #[test]
    fn aggregate_examples() {
        let id = RigidTransform::identity();
        let a = aggregate(&[(Vector3::new(1.0, 2.0, 3.0), id)]).unwrap();
        assert_eq!(a.landmark, Vector3::new(1.0, 2.0, 3.0));

        let a = aggregate(&[(Vector3::zeros(), id), (Vector3::new(2.0, 0.0, 0.0), id)]).unwrap();
        assert_eq!(a.landmark, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(a.residuals, vec![1.0, 1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Vector3::new(0.3, -1.2, 2.0);
        let (t1, t2) = (random_pose(&mut rng), random_pose(&mut rng));
        let a = aggregate(&[(t1.apply(&q), t1), (t2.apply(&q), t2)]).unwrap();
        assert!((a.landmark - q).norm() < 1e-9);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn aggregate_matches_stacked_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.random_range(1..6);
            let obs: Vec<_> = (0..n)
                .map(|_| {
                    let p = Vector3::new(
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                    );
                    (p, random_pose(&mut rng))
                })
                .collect();
            let closed = aggregate(&obs).unwrap().landmark;
            assert!((closed - stacked_lstsq(&obs)).norm() < 1e-10);
        }
    }

    fn world_setup(n_scans: usize, seed: u64) -> (PoseMap, Point3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poses = (0..n_scans).map(|i| (i, random_pose(&mut rng))).collect();
        (poses, Vector3::new(1.0, 2.0, -0.5))
    }

    fn observe(poses: &PoseMap, scan: usize, kp: usize, q: &Point3) -> Observation {
        Observation::new(scan, kp, poses[&scan].apply(q))
    }

    #[test]
    fn ransac_consensus_examples() {
        let (poses, q) = world_setup(5, 1);
        let obs: Vec<_> = (0..5).map(|s| observe(&poses, s, 0, &q)).collect();
        let c = aggregation_ransac(&obs, &poses, 0.05, 0).unwrap();
        assert_eq!(c.inliers, vec![0, 1, 2, 3, 4]);
        assert!((c.landmark - q).norm() < 1e-9);

        let mut bad = obs.clone();
        bad[2].point += Vector3::new(0.5, 0.0, 0.0);
        let c = aggregation_ransac(&bad, &poses, 0.05, 0).unwrap();
        assert_eq!(c.inliers, vec![0, 1, 3, 4]);

        let id = RigidTransform::identity();
        let poses2: PoseMap = [(0, id), (1, id)].into_iter().collect();
        let pair = [
            Observation::new(0, 0, Vector3::zeros()),
            Observation::new(1, 0, Vector3::new(1.0, 0.0, 0.0)),
        ];
        assert!(matches!(
            aggregation_ransac(&pair, &poses2, 0.05, 0),
            Err(Error::NoConsensus { .. })
        ));
    }

    #[test]
    fn create_examples() {
        let (poses, q) = world_setup(3, 2);
        let cfg = TrackConfig::default();

        let mut store = TrackStore::new();
        let m = [(observe(&poses, 0, 4, &q), observe(&poses, 1, 7, &q))];
        let s = create_tracks(&mut store, &poses, &m, &cfg);
        assert_eq!(s.created.len(), 1);
        assert_eq!(store.get(0).unwrap().len(), 2);
        assert_eq!(store.track_of(1, 7), Some(0));

        let mut store = TrackStore::new();
        let mut wrong = observe(&poses, 1, 7, &q);
        wrong.point += Vector3::new(0.0, 1.0, 0.0);
        let s = create_tracks(&mut store, &poses, &[(observe(&poses, 0, 4, &q), wrong)], &cfg);
        assert!(s.created.is_empty());
        assert_eq!(s.rejected, 1);

        // a↔b, b↔c → one three-observation track
        let mut store = TrackStore::new();
        let (a, b, c) = (
            observe(&poses, 0, 1, &q),
            observe(&poses, 1, 2, &q),
            observe(&poses, 2, 3, &q),
        );
        let s = create_tracks(&mut store, &poses, &[(a, b), (b, c)], &cfg);
        assert_eq!(s.created.len(), 1);
        assert_eq!(store.get(s.created[0]).unwrap().len(), 3);
        assert!(store.is_consistent());
    }

    #[test]
    fn continue_examples() {
        let (poses, q) = world_setup(3, 4);
        let cfg = TrackConfig::default();
        let mut store = TrackStore::new();
        store
            .insert(q, vec![observe(&poses, 0, 0, &q), observe(&poses, 1, 0, &q)])
            .unwrap();

        let mut far = observe(&poses, 2, 0, &q);
        far.point += Vector3::new(1.0, 0.0, 0.0);
        let s = continue_tracks(&mut store, &poses, &[(far, 0)], &cfg);
        assert_eq!(s.rejected, 1);
        assert_eq!(store.get(0).unwrap().len(), 2);

        let s = continue_tracks(&mut store, &poses, &[(observe(&poses, 2, 0, &q), 0)], &cfg);
        assert_eq!(s.extended, vec![0]);
        assert_eq!(store.get(0).unwrap().len(), 3);
        assert!((store.get(0).unwrap().landmark - q).norm() < 1e-9);
        assert!(store.is_consistent());
    }

    #[test]
    fn continue_prefers_lower_residual_landmark() {
        let (poses, q) = world_setup(3, 5);
        let q2 = q + Vector3::new(0.05, 0.0, 0.0);
        let cfg = TrackConfig::default();
        let mut store = TrackStore::new();
        store
            .insert(q, vec![observe(&poses, 0, 0, &q), observe(&poses, 1, 0, &q)])
            .unwrap();
        store
            .insert(q2, vec![observe(&poses, 0, 1, &q2), observe(&poses, 1, 1, &q2)])
            .unwrap();
        let kp = observe(&poses, 2, 9, &q2);
        let s = continue_tracks(&mut store, &poses, &[(kp, 0), (kp, 1)], &cfg);
        assert_eq!(s.extended, vec![1]);
        assert_eq!(s.conflicts, 1);
        assert_eq!(store.get(0).unwrap().len(), 2);
    }

    #[test]
    fn filter_examples() {
        let (poses, q) = world_setup(2, 6);
        let mut store = TrackStore::new();
        store
            .insert(q, vec![observe(&poses, 0, 0, &q), observe(&poses, 1, 0, &q)])
            .unwrap();
        assert!(filter_tracks(&mut store, &poses, 0.1, 2).is_empty());

        let mut off = observe(&poses, 1, 1, &q);
        off.point += Vector3::new(0.0, 0.0, 0.4);
        store.insert(q, vec![observe(&poses, 0, 1, &q), off]).unwrap();
        let before = store.len();
        assert_eq!(filter_tracks(&mut store, &poses, 0.1, 2), vec![1]);
        assert_eq!(store.active_count() + store.filtered_count(), before);
        assert_eq!(store.track_of(0, 1), None);
        let snapshot = store.clone();
        filter_tracks(&mut store, &poses, 0.1, 2);
        assert_eq!(store, snapshot);
    }

    #[test]
    fn visibility_counts_distinct_tracks() {
        let (poses, q) = world_setup(3, 7);
        let mut store = TrackStore::new();
        assert_eq!(visible_track_count(&store, []), 0);
        store
            .insert(
                q,
                vec![
                    observe(&poses, 0, 0, &q),
                    observe(&poses, 1, 0, &q),
                    observe(&poses, 2, 0, &q),
                ],
            )
            .unwrap();
        assert_eq!(visible_track_count(&store, [(0, 0), (1, 0), (2, 0)]), 1);
        for k in 1..41 {
            store
                .insert(q, vec![observe(&poses, 0, k, &q), observe(&poses, 1, k, &q)])
                .unwrap();
        }
        assert_eq!(visible_track_count(&store, (1..41).map(|k| (0, k))), 40);
    }

    #[test]
    fn insert_enforces_exclusivity() {
        let (poses, q) = world_setup(2, 8);
        let mut store = TrackStore::new();
        store
            .insert(q, vec![observe(&poses, 0, 0, &q), observe(&poses, 1, 0, &q)])
            .unwrap();
        assert!(store
            .insert(q, vec![observe(&poses, 0, 0, &q), observe(&poses, 1, 5, &q)])
            .is_err());
        assert!(store
            .insert(q, vec![observe(&poses, 0, 3, &q), observe(&poses, 0, 4, &q)])
            .is_err());
        assert!(store.insert(q, vec![observe(&poses, 0, 3, &q)]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn adding_consistent_observation_keeps_residual_zero(seed in 0u64..500, n in 2usize..6) {
                let (poses, q) = world_setup(n + 1, seed);
                let mut store = TrackStore::new();
                store.insert(q, (0..n).map(|s| observe(&poses, s, 0, &q)).collect()).unwrap();
                continue_tracks(&mut store, &poses, &[(observe(&poses, n, 0, &q), 0)], &TrackConfig::default());
                let t = store.get(0).unwrap();
                prop_assert_eq!(t.len(), n + 1);
                prop_assert!(t.max_residual(&poses) < 1e-9);
            }
        }
    }
}
