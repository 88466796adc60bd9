//! Incremental registration: seed a model from the best-connected pair, then
//! repeatedly register the scan that sees the most existing tracks, with
//! local and global bundle adjustment keeping the model consistent.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ba::{energy, solve_global, solve_local, BaProblem, Loss, SolverConfig};
use crate::error::{Error, Result};
use crate::geometry::{
    compose, ransac_rigid, rotation_distance, CorrespondenceSet, Point3, RansacConfig, RigidTransform,
};
use crate::graph::{edge_seed, ScanGraph};
use crate::tracks::{
    continue_tracks, create_tracks, filter_tracks, visible_track_count, Observation, PoseMap, TrackConfig, TrackId,
    TrackStore,
};

#[derive(Clone, Debug, PartialEq)]
pub struct EngineConfig {
    /// Matches an initial pair must exceed.
    pub min_initial_matches: usize,
    /// Visible tracks a next scan must exceed.
    pub min_visible_tracks: usize,
    /// Clustering rotation threshold (radians).
    pub cluster_rotation: f64,
    /// Clustering distance threshold between scan centres (m).
    pub cluster_translation: f64,
    /// When false, candidates are pooled without clustering.
    pub clustering: bool,
    pub ransac: RansacConfig,
    pub tracks: TrackConfig,
    pub local_ba: bool,
    pub global_ba: bool,
    /// Global BA after this many registrations...
    pub global_every: usize,
    /// ...or once the model grew by this fraction.
    pub global_growth: f64,
    pub local_solver: SolverConfig,
    pub global_solver: SolverConfig,
    pub loss: Loss,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            min_initial_matches: 100,
            min_visible_tracks: 30,
            cluster_rotation: 5f64.to_radians(),
            cluster_translation: 0.2,
            clustering: true,
            ransac: RansacConfig::default(),
            tracks: TrackConfig::default(),
            local_ba: true,
            global_ba: true,
            global_every: 5,
            global_growth: 0.25,
            local_solver: SolverConfig::local(),
            global_solver: SolverConfig::global(),
            loss: Loss::Squared,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[default]
    Incremental,
    Coarse,
    Refined,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub scan: usize,
    pub candidates: usize,
    pub cluster_size: usize,
    pub pooled_matches: usize,
    pub inliers: usize,
    pub continued: usize,
    pub continue_rejected: usize,
    pub created: usize,
    pub create_rejected: usize,
    pub filtered: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GlobalBaRecord {
    pub registered: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub initial_pair: (usize, usize),
    pub initial_tracks: usize,
    pub steps: Vec<StepStats>,
    pub global_ba: Vec<GlobalBaRecord>,
    /// Scans picked as next scan whose registration failed.
    pub failed_attempts: Vec<usize>,
    /// Graph edges whose matches fed this model.
    pub edges_used: BTreeSet<(usize, usize)>,
}

/// One reconstructed component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegistrationModel {
    pub component: usize,
    pub poses: PoseMap,
    pub tracks: TrackStore,
    pub order: Vec<usize>,
    pub stage: Stage,
    pub stats: ModelStats,
}

impl RegistrationModel {
    pub fn anchor(&self) -> Option<usize> {
        self.order.first().copied()
    }

    pub fn contains(&self, scan: usize) -> bool {
        self.poses.contains_key(&scan)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn energy(&self) -> f64 {
        energy(&BaProblem::from_tracks(&self.tracks, &self.poses, self.anchor()))
    }
}

/// Models plus the scans no model could take.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOutcome {
    pub models: Vec<RegistrationModel>,
    pub unregistered: Vec<usize>,
}

fn bfs_hops(adj: &[Vec<usize>], allowed: &dyn Fn(usize) -> bool, s: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; adj.len()];
    dist[s] = Some(0);
    let mut queue = VecDeque::from([s]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].expect("visited");
        for &v in &adj[u] {
            if dist[v].is_none() && allowed(v) {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

fn centrality_within(graph: &ScanGraph, allowed: &dyn Fn(usize) -> bool) -> BTreeMap<usize, f64> {
    let adj = graph.adjacency();
    (0..graph.node_count())
        .filter(|&s| allowed(s))
        .map(|s| {
            let dist = bfs_hops(&adj, allowed, s);
            let (reach, total) = dist
                .iter()
                .flatten()
                .fold((0usize, 0usize), |(n, t), &d| (n + 1, t + d));
            let c = if total == 0 {
                0.0
            } else {
                (reach - 1) as f64 / total as f64
            };
            (s, c)
        })
        .collect()
}

/// Closeness centrality `(N_reach − 1) / Σ hops` per connected component.
pub fn closeness_centrality(graph: &ScanGraph) -> BTreeMap<usize, f64> {
    centrality_within(graph, &|_| true)
}

/// Scans by descending centrality, ties by id.
fn centrality_order(c: &BTreeMap<usize, f64>) -> Vec<usize> {
    let mut order: Vec<usize> = c.keys().copied().collect();
    order.sort_by(|a, b| c[b].total_cmp(&c[a]).then(a.cmp(b)));
    order
}

/// First scan in centrality order whose strongest edge has more than
/// `min_matches` inlier matches, together with that neighbour. Only scans
/// accepted by `allowed` (and edges between them) are considered.
pub fn select_initial_pair_within(
    graph: &ScanGraph,
    allowed: &dyn Fn(usize) -> bool,
    min_matches: usize,
) -> Option<(usize, usize)> {
    let c = centrality_within(graph, allowed);
    for s in centrality_order(&c) {
        let best = graph
            .neighbors(s)
            .into_iter()
            .filter(|&n| allowed(n))
            .map(|n| (graph.edge(s, n).expect("neighbour edge").inlier_count, n))
            .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        if let Some((m, n)) = best {
            if m > min_matches {
                return Some((s, n));
            }
        }
    }
    None
}

pub fn select_initial_pair(graph: &ScanGraph, min_matches: usize) -> Option<(usize, usize)> {
    select_initial_pair_within(graph, &|_| true, min_matches)
}

fn keypoint(graph: &ScanGraph, scan: usize, kp: usize) -> Point3 {
    graph.nodes[scan].positions[kp]
}

fn observation(graph: &ScanGraph, scan: usize, kp: usize) -> Observation {
    Observation::new(scan, kp, keypoint(graph, scan, kp))
}

/// Two-scan model: `i` at identity, `j` at the edge transform, tracks from the
/// edge's inlier matches.
pub fn initialize(graph: &ScanGraph, pair: (usize, usize), config: &EngineConfig) -> Result<RegistrationModel> {
    let (i, j) = pair;
    let rel = graph
        .relative_transform(i, j)
        .ok_or_else(|| Error::InvalidInput(format!("no edge between {i} and {j}")))?;
    let mut model = RegistrationModel::default();
    model.poses.insert(i, RigidTransform::identity());
    model.poses.insert(j, rel);
    model.order = vec![i, j];
    let matches: Vec<(Observation, Observation)> = graph
        .oriented_inliers(i, j)
        .into_iter()
        .map(|(a, b)| (observation(graph, i, a), observation(graph, j, b)))
        .collect();
    let stats = create_tracks(&mut model.tracks, &model.poses, &matches, &config.tracks);
    model.stats.initial_pair = (i, j);
    model.stats.initial_tracks = stats.created.len();
    model.stats.edges_used.insert((i.min(j), i.max(j)));
    Ok(model)
}

fn registered_neighbors(model: &RegistrationModel, graph: &ScanGraph, scan: usize) -> Vec<usize> {
    graph
        .neighbors(scan)
        .into_iter()
        .filter(|n| model.contains(*n))
        .collect()
}

/// Active tracks visible to `scan` through its inlier matches with registered scans.
pub fn visible_tracks(model: &RegistrationModel, graph: &ScanGraph, scan: usize) -> usize {
    let endpoints = registered_neighbors(model, graph, scan)
        .into_iter()
        .flat_map(|k| graph.oriented_inliers(scan, k).into_iter().map(move |(_, b)| (k, b)));
    visible_track_count(&model.tracks, endpoints)
}

/// The unregistered neighbour of the model seeing the most tracks, if it sees
/// more than `min_tracks`.
pub fn select_next_scan(
    model: &RegistrationModel,
    graph: &ScanGraph,
    min_tracks: usize,
    eligible: &dyn Fn(usize) -> bool,
) -> Option<usize> {
    let frontier: BTreeSet<usize> = model
        .poses
        .keys()
        .flat_map(|&s| graph.neighbors(s))
        .filter(|&n| !model.contains(n) && eligible(n))
        .collect();
    let mut best: Option<(usize, usize)> = None;
    for l in frontier {
        let m = visible_tracks(model, graph, l);
        if m > min_tracks && best.is_none_or(|(bm, _)| m > bm) {
            best = Some((m, l));
        }
    }
    best.map(|(_, l)| l)
}

/// A pose hypothesis for the next scan from one registered neighbour.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePose {
    pub transform: RigidTransform,
    pub neighbor: usize,
    /// `(keypoint in the new scan, track)` pairs routed through this neighbour.
    pub matches: Vec<(usize, TrackId)>,
    pub inlier_count: usize,
}

fn correspondences(
    model: &RegistrationModel,
    graph: &ScanGraph,
    scan: usize,
    matches: &[(usize, TrackId)],
) -> Result<CorrespondenceSet> {
    CorrespondenceSet::new(
        matches
            .iter()
            .map(|&(kp, t)| {
                let q = model.tracks.get(t).expect("routed track exists").landmark;
                (q, keypoint(graph, scan, kp))
            })
            .collect(),
    )
}

/// One candidate per registered neighbour whose matches reach active tracks
/// and admit a RANSAC consensus.
pub fn candidate_poses(
    model: &RegistrationModel,
    graph: &ScanGraph,
    scan: usize,
    ransac: &RansacConfig,
) -> Result<Vec<CandidatePose>> {
    let neighbors = registered_neighbors(model, graph, scan);
    let out: Vec<CandidatePose> = neighbors
        .par_iter()
        .filter_map(|&k| {
            let mut matches: Vec<(usize, TrackId)> = graph
                .oriented_inliers(scan, k)
                .into_iter()
                .filter_map(|(a, b)| model.tracks.track_of(k, b).map(|t| (a, t)))
                .collect();
            matches.sort_unstable();
            matches.dedup();
            if matches.len() < 3 {
                return None;
            }
            let corr = correspondences(model, graph, scan, &matches).ok()?;
            let cfg = RansacConfig {
                seed: edge_seed(ransac.seed, scan, k),
                ..*ransac
            };
            let r = ransac_rigid(&corr, &cfg).ok()?;
            Some(CandidatePose {
                transform: r.transform,
                neighbor: k,
                matches,
                inlier_count: r.inlier_count,
            })
        })
        .collect();
    if out.is_empty() {
        Err(Error::NoCandidates { scan })
    } else {
        Ok(out)
    }
}

/// Result of [`cluster_and_register`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterRegistration {
    pub transform: RigidTransform,
    /// Indices into the candidate list.
    pub cluster: Vec<usize>,
    pub pooled: Vec<(usize, TrackId)>,
    pub inliers: Vec<(usize, TrackId)>,
}

fn candidates_linked(a: &CandidatePose, b: &CandidatePose, eps_r: f64, eps_t: f64) -> bool {
    rotation_distance(&a.transform, &b.transform) <= eps_r
        && (a.transform.center() - b.transform.center()).norm() <= eps_t
}

/// Single-linkage clusters of candidates, each sorted, in order of first member.
pub fn cluster_candidates(candidates: &[CandidatePose], eps_r: f64, eps_t: f64) -> Vec<Vec<usize>> {
    let n = candidates.len();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut clusters = Vec::new();
    for s in 0..n {
        if label[s].is_some() {
            continue;
        }
        let id = clusters.len();
        label[s] = Some(id);
        let mut members = vec![s];
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            for v in 0..n {
                if label[v].is_none() && candidates_linked(&candidates[u], &candidates[v], eps_r, eps_t) {
                    label[v] = Some(id);
                    members.push(v);
                    stack.push(v);
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    clusters
}

fn pool(candidates: &[CandidatePose], members: &[usize]) -> Vec<(usize, TrackId)> {
    let set: BTreeSet<(usize, TrackId)> = members
        .iter()
        .flat_map(|&c| candidates[c].matches.iter().copied())
        .collect();
    set.into_iter().collect()
}

fn solve_pooled(
    model: &RegistrationModel,
    graph: &ScanGraph,
    scan: usize,
    pooled: Vec<(usize, TrackId)>,
    cluster: Vec<usize>,
    ransac: &RansacConfig,
) -> Result<ClusterRegistration> {
    let corr = correspondences(model, graph, scan, &pooled)?;
    let cfg = RansacConfig {
        seed: edge_seed(ransac.seed, scan, scan),
        ..*ransac
    };
    let r = ransac_rigid(&corr, &cfg)?;
    let inliers = r.inlier_indices().map(|k| pooled[k]).collect();
    Ok(ClusterRegistration {
        transform: r.transform,
        cluster,
        pooled,
        inliers,
    })
}

/// Clusters the candidates, keeps the largest cluster (ties: more supporting
/// matches, then earliest member) and re-solves on its pooled matches.
pub fn cluster_and_register(
    model: &RegistrationModel,
    graph: &ScanGraph,
    scan: usize,
    candidates: &[CandidatePose],
    config: &EngineConfig,
) -> Result<ClusterRegistration> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates { scan });
    }
    let clusters = cluster_candidates(candidates, config.cluster_rotation, config.cluster_translation);
    let support = |m: &Vec<usize>| m.iter().map(|&c| candidates[c].matches.len()).sum::<usize>();
    let best = clusters
        .into_iter()
        .max_by(|a, b| {
            a.len()
                .cmp(&b.len())
                .then(support(a).cmp(&support(b)))
                .then(b[0].cmp(&a[0]))
        })
        .expect("non-empty candidate list");
    let pooled = pool(candidates, &best);
    solve_pooled(model, graph, scan, pooled, best, &config.ransac)
}

/// Ablation: all candidates' matches pooled into a single RANSAC.
pub fn register_pooled(
    model: &RegistrationModel,
    graph: &ScanGraph,
    scan: usize,
    candidates: &[CandidatePose],
    ransac: &RansacConfig,
) -> Result<ClusterRegistration> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates { scan });
    }
    let all: Vec<usize> = (0..candidates.len()).collect();
    let pooled = pool(candidates, &all);
    solve_pooled(model, graph, scan, pooled, all, ransac)
}

fn run_global_ba(model: &mut RegistrationModel, config: &EngineConfig) -> Result<()> {
    model.tracks.reaggregate_all(&model.poses);
    let mut problem = BaProblem::from_tracks(&model.tracks, &model.poses, model.anchor());
    problem.loss = config.loss;
    let report = solve_global(&mut problem, &config.global_solver)?;
    problem.write_back(&mut model.tracks, &mut model.poses);
    model.stats.global_ba.push(GlobalBaRecord {
        registered: model.len(),
        initial_energy: report.initial_energy,
        final_energy: report.final_energy,
        iterations: report.iterations,
    });
    Ok(())
}

fn run_local_ba(model: &mut RegistrationModel, graph: &ScanGraph, scan: usize, config: &EngineConfig) -> Result<()> {
    let anchor = model.anchor();
    let mut free: BTreeSet<usize> = registered_neighbors(model, graph, scan).into_iter().collect();
    free.insert(scan);
    if let Some(a) = anchor {
        free.remove(&a);
    }
    let mut problem = BaProblem::from_tracks(&model.tracks, &model.poses, anchor);
    problem.loss = config.loss;
    solve_local(&mut problem, &free, &config.local_solver)?;
    for s in free {
        model.poses.insert(s, problem.poses[&s]);
    }
    Ok(())
}

/// Registers `scan` into `model`: candidate poses, clustering, track updates
/// and local BA.
pub fn register_scan(
    model: &mut RegistrationModel,
    graph: &ScanGraph,
    scan: usize,
    config: &EngineConfig,
) -> Result<StepStats> {
    let ransac = RansacConfig {
        seed: config.ransac.seed ^ config.seed,
        ..config.ransac
    };
    let candidates = candidate_poses(model, graph, scan, &ransac)?;
    let cfg = EngineConfig {
        ransac,
        ..config.clone()
    };
    let reg = if config.clustering {
        cluster_and_register(model, graph, scan, &candidates, &cfg)?
    } else {
        register_pooled(model, graph, scan, &candidates, &ransac)?
    };
    let mut step = StepStats {
        scan,
        candidates: candidates.len(),
        cluster_size: reg.cluster.len(),
        pooled_matches: reg.pooled.len(),
        inliers: reg.inliers.len(),
        ..Default::default()
    };
    model.poses.insert(scan, reg.transform);
    model.order.push(scan);

    let neighbors = registered_neighbors(model, graph, scan);
    let mut continuations = Vec::new();
    for &k in &neighbors {
        model.stats.edges_used.insert((scan.min(k), scan.max(k)));
        for (a, b) in graph.oriented_inliers(scan, k) {
            if let Some(t) = model.tracks.track_of(k, b) {
                continuations.push((observation(graph, scan, a), t));
            }
        }
    }
    let track_cfg = TrackConfig {
        seed: config.tracks.seed ^ config.seed ^ scan as u64,
        ..config.tracks.clone()
    };
    let cont = continue_tracks(&mut model.tracks, &model.poses, &continuations, &track_cfg);
    step.continued = cont.extended.len();
    step.continue_rejected = cont.rejected;

    let mut fresh = Vec::new();
    for &k in &neighbors {
        for (a, b) in graph.oriented_inliers(scan, k) {
            if model.tracks.track_of(scan, a).is_none() && model.tracks.track_of(k, b).is_none() {
                fresh.push((observation(graph, scan, a), observation(graph, k, b)));
            }
        }
    }
    let created = create_tracks(&mut model.tracks, &model.poses, &fresh, &track_cfg);
    step.created = created.created.len();
    step.create_rejected = created.rejected;

    if config.local_ba {
        run_local_ba(model, graph, scan, config)?;
    }
    step.filtered = filter_tracks(
        &mut model.tracks,
        &model.poses,
        config.tracks.filter_threshold,
        config.tracks.min_length,
    )
    .len();
    Ok(step)
}

/// Grows a model from `pair` until no further scan qualifies.
pub fn grow_model(
    graph: &ScanGraph,
    pair: (usize, usize),
    eligible: &dyn Fn(usize) -> bool,
    config: &EngineConfig,
) -> Result<RegistrationModel> {
    let mut model = initialize(graph, pair, config)?;
    let mut failed: BTreeSet<usize> = BTreeSet::new();
    let mut since_global = 0usize;
    let mut size_at_global = model.len();
    loop {
        let next = select_next_scan(&model, graph, config.min_visible_tracks, &|s| {
            eligible(s) && !failed.contains(&s)
        });
        let Some(scan) = next else { break };
        let before = (model.poses.clone(), model.tracks.clone(), model.order.clone());
        match register_scan(&mut model, graph, scan, config) {
            Ok(step) => {
                log::debug!(
                    "registered scan {scan}: {} candidates, cluster {}, {} inliers",
                    step.candidates,
                    step.cluster_size,
                    step.inliers
                );
                model.stats.steps.push(step);
                failed.clear();
                since_global += 1;
                let grown = model.len() as f64 >= (1.0 + config.global_growth) * size_at_global as f64;
                if config.global_ba && (since_global >= config.global_every || grown) {
                    run_global_ba(&mut model, config)?;
                    since_global = 0;
                    size_at_global = model.len();
                }
            }
            Err(e) => {
                log::debug!("scan {scan} not registered: {e}");
                (model.poses, model.tracks, model.order) = before;
                model.stats.failed_attempts.push(scan);
                failed.insert(scan);
            }
        }
    }
    if config.global_ba {
        run_global_ba(&mut model, config)?;
    }
    filter_tracks(
        &mut model.tracks,
        &model.poses,
        config.tracks.filter_threshold,
        config.tracks.min_length,
    );
    Ok(model)
}

/// Full incremental registration with re-initialisation among leftover scans.
pub fn run_incremental_with_report(graph: &ScanGraph, config: &EngineConfig) -> Result<RunOutcome> {
    let mut taken: BTreeSet<usize> = BTreeSet::new();
    let mut models = Vec::new();
    loop {
        let free = |s: usize| !taken.contains(&s);
        let Some(pair) = select_initial_pair_within(graph, &free, config.min_initial_matches) else {
            break;
        };
        let mut model = grow_model(graph, pair, &free, config)?;
        model.component = models.len();
        log::info!("component {} holds {} scans", model.component, model.len());
        taken.extend(model.poses.keys().copied());
        models.push(model);
    }
    let unregistered = (0..graph.node_count()).filter(|s| !taken.contains(s)).collect();
    Ok(RunOutcome { models, unregistered })
}

pub fn run_incremental(graph: &ScanGraph, config: &EngineConfig) -> Result<Vec<RegistrationModel>> {
    run_incremental_with_report(graph, config).map(|o| o.models)
}

/// Pose chaining along the maximum spanning tree (by inlier count) of every
/// connected component, rooted at its most central scan.
pub fn mst_baseline(graph: &ScanGraph) -> Vec<BTreeMap<usize, RigidTransform>> {
    let n = graph.node_count();
    let mut edges: Vec<(usize, usize, usize)> = graph.edges.iter().map(|(&(i, j), e)| (e.inlier_count, i, j)).collect();
    edges.sort_by(|a, b| b.0.cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut tree = vec![Vec::new(); n];
    for (_, i, j) in edges {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri] = rj;
            tree[i].push(j);
            tree[j].push(i);
        }
    }
    tree.iter_mut().for_each(|v| v.sort_unstable());

    let centrality = closeness_centrality(graph);
    let mut out = Vec::new();
    for comp in graph.components() {
        if comp.len() < 2 {
            continue;
        }
        let root = *comp
            .iter()
            .max_by(|a, b| centrality[a].total_cmp(&centrality[b]).then(b.cmp(a)))
            .expect("non-empty component");
        let mut poses = BTreeMap::new();
        poses.insert(root, RigidTransform::identity());
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            let pu = poses[&u];
            for &v in &tree[u] {
                if poses.contains_key(&v) {
                    continue;
                }
                let rel = graph.relative_transform(u, v).expect("tree edge exists");
                poses.insert(v, compose(&rel, &pu));
                queue.push_back(v);
            }
        }
        out.push(poses);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, KeypointSet, MatchSet};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bare_graph(n: usize, edges: &[(usize, usize, usize)]) -> ScanGraph {
        let mut g = ScanGraph::new(vec![KeypointSet::positions_only(vec![Vector3::zeros(); 600]); n]);
        for &(i, j, m) in edges {
            let pairs: Vec<(usize, usize)> = (0..m).map(|k| (k, k)).collect();
            g.insert_edge(Edge {
                matches: MatchSet::new((i, j), pairs, None).unwrap(),
                inliers: vec![true; m],
                transform: RigidTransform::identity(),
                inlier_count: m,
                inlier_ratio: 1.0,
                overlap: 1.0,
            })
            .unwrap();
        }
        g
    }

    #[test]
    fn centrality_examples() {
        let path = closeness_centrality(&bare_graph(3, &[(0, 1, 1), (1, 2, 1)]));
        assert!(path[&1] > path[&0]);
        assert_eq!(path[&0], path[&2]);

        let k4 = closeness_centrality(&bare_graph(
            4,
            &[(0, 1, 1), (0, 2, 1), (0, 3, 1), (1, 2, 1), (1, 3, 1), (2, 3, 1)],
        ));
        assert!(k4.values().all(|&c| c == 1.0));

        let star = closeness_centrality(&bare_graph(6, &[(0, 1, 1), (0, 2, 1), (0, 3, 1), (0, 4, 1), (0, 5, 1)]));
        assert_eq!(star[&0], 1.0);
        for leaf in 1..6 {
            // 1 hop to the centre, 2 hops to each of 4 other leaves
            assert!((star[&leaf] - 5.0 / 9.0).abs() < 1e-15);
        }

        let lonely = closeness_centrality(&bare_graph(3, &[(0, 1, 1)]));
        assert_eq!(lonely[&2], 0.0);
    }

    #[test]
    fn initial_pair_examples() {
        let star = bare_graph(4, &[(0, 1, 120), (0, 2, 90), (0, 3, 60)]);
        assert_eq!(select_initial_pair(&star, 100), Some((0, 1)));
        assert_eq!(select_initial_pair(&star, 120), None);
        assert_eq!(select_initial_pair(&bare_graph(2, &[(0, 1, 500)]), 100), Some((0, 1)));
    }

    /// Scans that all see one set of world points; scan `s` keypoint `k` is
    /// world point `k` in scan coordinates.
    fn shared_scene(n: usize, points: usize, seed: u64, edges: &[(usize, usize)]) -> (ScanGraph, Vec<RigidTransform>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let world: Vec<Point3> = (0..points)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let mut poses = vec![RigidTransform::identity()];
        for _ in 1..n {
            poses.push(RigidTransform::from_axis_angle(
                &Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 1.0),
                rng.random_range(-1.0..1.0),
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.2..0.2),
                ),
            ));
        }
        let nodes = poses
            .iter()
            .map(|t| KeypointSet::positions_only(world.iter().map(|w| t.apply(w)).collect()))
            .collect();
        let mut g = ScanGraph::new(nodes);
        for &(i, j) in edges {
            let pairs: Vec<(usize, usize)> = (0..points).map(|k| (k, k)).collect();
            g.insert_edge(Edge {
                matches: MatchSet::new((i, j), pairs, None).unwrap(),
                inliers: vec![true; points],
                transform: compose(&poses[j], &poses[i].inverse()),
                inlier_count: points,
                inlier_ratio: 1.0,
                overlap: 1.0,
            })
            .unwrap();
        }
        (g, poses)
    }

    fn cfg() -> EngineConfig {
        EngineConfig {
            ransac: RansacConfig {
                iterations: 200,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn initialize_examples() {
        let (g, _) = shared_scene(2, 100, 1, &[(0, 1)]);
        let m = initialize(&g, (0, 1), &cfg()).unwrap();
        assert_eq!(m.poses[&0], RigidTransform::identity());
        assert_eq!(m.len(), 2);
        assert!(m.tracks.active_count() <= 100 && m.tracks.active_count() > 0);
        assert!(m.tracks.active().all(|(_, t)| t.max_residual(&m.poses) < 1e-9));
    }

    #[test]
    fn next_scan_and_candidates_on_chain() {
        let (g, poses) = shared_scene(3, 80, 2, &[(0, 1), (1, 2)]);
        let m = initialize(&g, (0, 1), &cfg()).unwrap();
        assert_eq!(select_next_scan(&m, &g, 30, &|_| true), Some(2));
        assert_eq!(select_next_scan(&m, &g, 80, &|_| true), None);
        let c = candidate_poses(&m, &g, 2, &cfg().ransac).unwrap();
        assert_eq!(c.len(), 1);
        assert!(rotation_distance(&c[0].transform, &poses[2]) < 1e-9);
    }

    #[test]
    fn consistent_neighbors_agree() {
        let (g, _) = shared_scene(4, 60, 3, &[(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)]);
        let mut m = initialize(&g, (0, 1), &cfg()).unwrap();
        register_scan(&mut m, &g, 2, &cfg()).unwrap();
        let c = candidate_poses(&m, &g, 3, &cfg().ransac).unwrap();
        assert_eq!(c.len(), 3);
        for a in &c {
            assert!(rotation_distance(&a.transform, &c[0].transform) < 1e-6);
            assert!((a.transform.translation - c[0].transform.translation).norm() < 1e-6);
        }
    }

    fn fake_candidate(angle: f64, neighbor: usize, matches: usize) -> CandidatePose {
        CandidatePose {
            transform: RigidTransform::from_axis_angle(&Vector3::z(), angle, Vector3::zeros()),
            neighbor,
            matches: (0..matches)
                .map(|k| (k + 1000 * neighbor, k + 1000 * neighbor))
                .collect(),
            inlier_count: matches,
        }
    }

    #[test]
    fn clustering_examples() {
        let cands = vec![
            fake_candidate(0.0, 0, 10),
            fake_candidate(0.001, 1, 10),
            fake_candidate(0.5, 2, 50),
            fake_candidate(0.002, 3, 10),
            fake_candidate(-0.001, 4, 10),
        ];
        let clusters = cluster_candidates(&cands, 5f64.to_radians(), 0.2);
        assert_eq!(clusters, vec![vec![0, 1, 3, 4], vec![2]]);

        // single linkage chains through intermediate members
        let chain = vec![
            fake_candidate(0.0, 0, 1),
            fake_candidate(0.06, 1, 1),
            fake_candidate(0.12, 2, 1),
        ];
        assert_eq!(cluster_candidates(&chain, 0.07, 0.2), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn wild_candidate_is_outvoted() {
        let (g, poses) = shared_scene(
            5,
            60,
            4,
            &[
                (0, 1),
                (0, 2),
                (1, 2),
                (0, 3),
                (1, 3),
                (2, 3),
                (0, 4),
                (1, 4),
                (2, 4),
                (3, 4),
            ],
        );
        let mut m = initialize(&g, (0, 1), &cfg()).unwrap();
        register_scan(&mut m, &g, 2, &cfg()).unwrap();
        register_scan(&mut m, &g, 3, &cfg()).unwrap();
        let mut c = candidate_poses(&m, &g, 4, &cfg().ransac).unwrap();
        assert_eq!(c.len(), 4);
        // shifted keypoint indices: every routed match is wrong
        let wild = c[0].matches.iter().map(|&(kp, t)| ((kp + 7) % 60, t)).collect();
        c.push(CandidatePose {
            transform: compose(
                &RigidTransform::from_axis_angle(&Vector3::z(), 0.6, Vector3::zeros()),
                &poses[4],
            ),
            neighbor: 99,
            matches: wild,
            inlier_count: 60,
        });
        let reg = cluster_and_register(&m, &g, 4, &c, &cfg()).unwrap();
        assert_eq!(reg.cluster, vec![0, 1, 2, 3]);
        let gt = compose(&poses[4], &poses[0].inverse());
        assert!(rotation_distance(&reg.transform, &gt) < 1e-6);
    }

    #[test]
    fn cluster_tie_prefers_more_support() {
        let cands = vec![
            fake_candidate(0.0, 0, 50),
            fake_candidate(0.001, 1, 50),
            fake_candidate(1.0, 2, 150),
            fake_candidate(1.001, 3, 150),
        ];
        let clusters = cluster_candidates(&cands, 5f64.to_radians(), 0.2);
        let support = |m: &Vec<usize>| m.iter().map(|&c| cands[c].matches.len()).sum::<usize>();
        let best = clusters
            .iter()
            .max_by(|a, b| a.len().cmp(&b.len()).then(support(a).cmp(&support(b))))
            .unwrap();
        assert_eq!(best, &vec![2, 3]);
    }

    #[test]
    fn full_run_recovers_poses() {
        let all: Vec<(usize, usize)> = (0..6).flat_map(|i| (i + 1..6).map(move |j| (i, j))).collect();
        let (g, poses) = shared_scene(6, 150, 5, &all);
        let out = run_incremental_with_report(&g, &cfg()).unwrap();
        assert_eq!(out.models.len(), 1);
        assert!(out.unregistered.is_empty());
        let m = &out.models[0];
        assert_eq!(m.len(), 6);
        let a = m.anchor().unwrap();
        assert_eq!(m.poses[&a], RigidTransform::identity());
        for (s, p) in &m.poses {
            // both frames are anchored at scan `a`
            let gt = compose(&poses[*s], &poses[a].inverse());
            assert!(rotation_distance(p, &gt) < 1e-6);
            assert!((p.translation - gt.translation).norm() < 1e-6);
        }
        for r in &m.stats.global_ba {
            assert!(r.final_energy <= r.initial_energy + 1e-12);
        }
        let mut order = m.order.clone();
        order.sort_unstable();
        assert_eq!(order, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn single_edge_leaves_rest_unregistered() {
        let (g, _) = shared_scene(4, 150, 6, &[(1, 2)]);
        let out = run_incremental_with_report(&g, &cfg()).unwrap();
        assert_eq!(out.models.len(), 1);
        assert_eq!(out.models[0].len(), 2);
        assert_eq!(out.unregistered, vec![0, 3]);
    }

    #[test]
    fn determinism() {
        let all: Vec<(usize, usize)> = (0..5).flat_map(|i| (i + 1..5).map(move |j| (i, j))).collect();
        let (g, _) = shared_scene(5, 120, 7, &all);
        let a = run_incremental(&g, &cfg()).unwrap();
        let b = run_incremental(&g, &cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mst_examples() {
        let (g, poses) = shared_scene(4, 20, 8, &[(0, 1), (1, 2), (2, 3)]);
        let mst = mst_baseline(&g);
        assert_eq!(mst.len(), 1);
        let root = 1; // ties in centrality between 1 and 2 go to the lower id
        assert_eq!(mst[0][&root], RigidTransform::identity());
        for (s, p) in &mst[0] {
            let gt = compose(&poses[*s], &poses[root].inverse());
            assert!(rotation_distance(p, &gt) < 1e-9);
            assert!((p.translation - gt.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn mst_isolates_corrupted_edge() {
        let (mut g, poses) = shared_scene(5, 20, 9, &[(0, 1), (0, 2), (0, 3), (0, 4)]);
        let e = g.edges.get_mut(&(0, 3)).unwrap();
        e.transform = compose(
            &RigidTransform::from_axis_angle(&Vector3::x(), 0.3, Vector3::zeros()),
            &e.transform,
        );
        let mst = &mst_baseline(&g)[0];
        for (s, p) in mst {
            let bad = rotation_distance(p, &compose(&poses[*s], &poses[0].inverse())) > 1e-6;
            assert_eq!(bad, *s == 3);
        }
    }
}
