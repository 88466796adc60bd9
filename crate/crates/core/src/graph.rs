//! Sparse scan graph construction: overlap scoring, top-k edge proposal,
//! keypoint extraction, descriptor matching and geometric verification.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::cloud::{estimate_normals, PointCloud};
use crate::descriptor::fpfh;
use crate::error::{Error, Result};
use crate::geometry::{invert, ransac_rigid, CorrespondenceSet, Point3, RansacConfig, RansacResult, RigidTransform};
use crate::spatial::{voxel_downsample, KdTree};

/// Keypoints of one scan with one descriptor each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeypointSet {
    pub positions: Vec<Point3>,
    pub descriptors: Vec<Vec<f64>>,
}

impl KeypointSet {
    pub fn new(positions: Vec<Point3>, descriptors: Vec<Vec<f64>>) -> Result<Self> {
        if positions.len() != descriptors.len() {
            return Err(Error::InvalidInput(format!(
                "{} keypoints but {} descriptors",
                positions.len(),
                descriptors.len()
            )));
        }
        if let Some(d) = descriptors.first() {
            if descriptors.iter().any(|x| x.len() != d.len()) {
                return Err(Error::InvalidInput("descriptor lengths differ".into()));
            }
        }
        if !positions.iter().all(|p| p.iter().all(|v| v.is_finite()))
            || !descriptors.iter().flatten().all(|v| v.is_finite())
        {
            return Err(Error::InvalidInput("non-finite keypoint data".into()));
        }
        Ok(Self { positions, descriptors })
    }

    /// Keypoints that carry no descriptor (zero-length vectors).
    pub fn positions_only(positions: Vec<Point3>) -> Self {
        let descriptors = vec![Vec::new(); positions.len()];
        Self { positions, descriptors }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptors.first().map_or(0, Vec::len)
    }
}

/// Keypoint correspondences between scans `edge.0` and `edge.1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchSet {
    pub edge: (usize, usize),
    /// `(keypoint index in edge.0, keypoint index in edge.1)`.
    pub pairs: Vec<(usize, usize)>,
    pub scores: Option<Vec<f64>>,
}

impl MatchSet {
    pub fn new(edge: (usize, usize), pairs: Vec<(usize, usize)>, scores: Option<Vec<f64>>) -> Result<Self> {
        if edge.0 == edge.1 {
            return Err(Error::InvalidInput(format!("self edge on scan {}", edge.0)));
        }
        if let Some(s) = &scores {
            if s.len() != pairs.len() {
                return Err(Error::InvalidInput("scores length differs from pairs".into()));
            }
        }
        let mut seen = HashSet::with_capacity(pairs.len());
        if !pairs.iter().all(|p| seen.insert(*p)) {
            return Err(Error::InvalidInput(format!("duplicate match pair on edge {edge:?}")));
        }
        Ok(Self { edge, pairs, scores })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn check_range(&self, a: &KeypointSet, b: &KeypointSet) -> Result<()> {
        match self.pairs.iter().find(|&&(x, y)| x >= a.len() || y >= b.len()) {
            Some(p) => Err(Error::InvalidInput(format!(
                "match {p:?} out of range on edge {:?}",
                self.edge
            ))),
            None => Ok(()),
        }
    }

    /// Same matches with endpoints swapped and the edge in `i < j` order.
    pub fn canonical(self) -> Self {
        if self.edge.0 < self.edge.1 {
            return self;
        }
        Self {
            edge: (self.edge.1, self.edge.0),
            pairs: self.pairs.into_iter().map(|(a, b)| (b, a)).collect(),
            scores: self.scores,
        }
    }
}

/// A verified edge stored in canonical `i < j` orientation.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub matches: MatchSet,
    pub inliers: Vec<bool>,
    /// Maps scan-i coordinates into scan-j coordinates.
    pub transform: RigidTransform,
    pub inlier_count: usize,
    pub inlier_ratio: f64,
    pub overlap: f64,
}

impl Edge {
    pub fn endpoints(&self) -> (usize, usize) {
        self.matches.edge
    }

    pub fn inlier_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.matches
            .pairs
            .iter()
            .zip(&self.inliers)
            .filter_map(|(p, &ok)| ok.then_some(*p))
    }
}

/// Scans (with keypoints) and verified pairwise edges.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScanGraph {
    pub nodes: Vec<KeypointSet>,
    pub edges: BTreeMap<(usize, usize), Edge>,
}

impl ScanGraph {
    pub fn new(nodes: Vec<KeypointSet>) -> Self {
        Self {
            nodes,
            edges: BTreeMap::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn insert_edge(&mut self, edge: Edge) -> Result<()> {
        let (i, j) = edge.endpoints();
        if i >= j || j >= self.nodes.len() {
            return Err(Error::InvalidInput(format!(
                "edge ({i},{j}) must be canonical and reference existing nodes"
            )));
        }
        edge.matches.check_range(&self.nodes[i], &self.nodes[j])?;
        if edge.inliers.len() != edge.matches.len() {
            return Err(Error::InvalidInput("inlier mask length differs".into()));
        }
        self.edges.insert((i, j), edge);
        Ok(())
    }

    pub fn edge(&self, a: usize, b: usize) -> Option<&Edge> {
        self.edges.get(&(a.min(b), a.max(b)))
    }

    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .keys()
            .filter_map(|&(i, j)| {
                if i == node {
                    Some(j)
                } else if j == node {
                    Some(i)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(i, j) in self.edges.keys() {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj.iter_mut().for_each(|v| v.sort_unstable());
        adj
    }

    /// Transform mapping scan-`from` coordinates into scan-`to` coordinates.
    pub fn relative_transform(&self, from: usize, to: usize) -> Option<RigidTransform> {
        let e = self.edge(from, to)?;
        Some(if from < to { e.transform } else { invert(&e.transform) })
    }

    /// Inlier matches oriented as `(keypoint in from, keypoint in to)`.
    pub fn oriented_inliers(&self, from: usize, to: usize) -> Vec<(usize, usize)> {
        let Some(e) = self.edge(from, to) else {
            return Vec::new();
        };
        if from < to {
            e.inlier_pairs().collect()
        } else {
            e.inlier_pairs().map(|(a, b)| (b, a)).collect()
        }
    }

    /// Connected components (including isolated nodes), each sorted.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.nodes.len()];
        let mut out = Vec::new();
        for s in 0..self.nodes.len() {
            if seen[s] {
                continue;
            }
            seen[s] = true;
            let mut comp = vec![s];
            let mut queue = VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        comp.push(v);
                        queue.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointConfig {
    /// Voxel cell edge (m); one keypoint per occupied cell.
    pub voxel: f64,
    pub normal_radius: f64,
    pub descriptor_radius: f64,
}

impl Default for KeypointConfig {
    fn default() -> Self {
        Self {
            voxel: 0.05,
            normal_radius: 0.1,
            descriptor_radius: 0.25,
        }
    }
}

/// Voxel-centroid keypoints with 33-bin histogram descriptors.
pub fn extract_keypoints(cloud: &PointCloud, config: &KeypointConfig) -> Result<KeypointSet> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if config.voxel <= 0.0 {
        return Err(Error::InvalidConfig("keypoint voxel must be > 0".into()));
    }
    let positions = voxel_downsample(&cloud.points, config.voxel);
    let tree = KdTree::new(&positions);
    let normals = estimate_normals(&positions, &tree, config.normal_radius);
    let descriptors = fpfh(&tree, &normals, config.descriptor_radius);
    KeypointSet::new(positions, descriptors)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchConfig {
    /// Lowe ratio threshold on descriptor distances (nearest / second).
    pub ratio: Option<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Two nearest descriptors of `q` in `set`: `(index, d², second d²)`.
fn nearest_two(q: &[f64], set: &[Vec<f64>]) -> Option<(usize, f64, f64)> {
    let mut best: Option<(usize, f64)> = None;
    let mut second = f64::INFINITY;
    for (i, d) in set.iter().enumerate() {
        let dist = sq_dist(q, d);
        match best {
            Some((_, bd)) if dist >= bd => second = second.min(dist),
            Some((_, bd)) => {
                second = bd;
                best = Some((i, dist));
            }
            None => best = Some((i, dist)),
        }
    }
    best.map(|(i, d)| (i, d, second))
}

/// Mutual nearest neighbours in descriptor space.
pub fn match_features(
    edge: (usize, usize),
    a: &KeypointSet,
    b: &KeypointSet,
    config: &MatchConfig,
) -> Result<MatchSet> {
    if !a.is_empty() && !b.is_empty() && a.descriptor_dim() != b.descriptor_dim() {
        return Err(Error::DimensionMismatch {
            left: a.descriptor_dim(),
            right: b.descriptor_dim(),
        });
    }
    let forward: Vec<Option<(usize, f64, f64)>> = a
        .descriptors
        .par_iter()
        .map(|d| nearest_two(d, &b.descriptors))
        .collect();
    let backward: Vec<Option<usize>> = b
        .descriptors
        .par_iter()
        .map(|d| nearest_two(d, &a.descriptors).map(|x| x.0))
        .collect();
    let mut pairs = Vec::new();
    let mut scores = Vec::new();
    for (i, f) in forward.iter().enumerate() {
        let Some((j, d1, d2)) = *f else { continue };
        if backward[j] != Some(i) {
            continue;
        }
        if let Some(r) = config.ratio {
            if d2.is_finite() && d1.sqrt() >= r * d2.sqrt() {
                continue;
            }
        }
        pairs.push((i, j));
        scores.push(1.0 / (1.0 + d1.sqrt()));
    }
    MatchSet::new(edge, pairs, Some(scores))
}

/// Result of geometric verification; `edge` is `None` when rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct Verification {
    pub edge: Option<Edge>,
    pub inlier_count: usize,
    pub inlier_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyThresholds {
    /// Minimum inlier count.
    pub min_inliers: usize,
    /// Minimum inlier ratio.
    pub min_ratio: f64,
}

impl Default for VerifyThresholds {
    fn default() -> Self {
        Self {
            min_inliers: 30,
            min_ratio: 0.3,
        }
    }
}

/// RANSAC over matched keypoint coordinates; keeps the edge iff both
/// thresholds hold. The stored transform maps scan-i into scan-j coordinates.
pub fn geometric_verify(
    matches: &MatchSet,
    a: &KeypointSet,
    b: &KeypointSet,
    thresholds: &VerifyThresholds,
    ransac: &RansacConfig,
    overlap: f64,
) -> Result<Verification> {
    matches.check_range(a, b)?;
    let rejected = |count, ratio| Verification {
        edge: None,
        inlier_count: count,
        inlier_ratio: ratio,
    };
    if matches.len() < 3 {
        return Ok(rejected(0, 0.0));
    }
    let corr = CorrespondenceSet::new(
        matches
            .pairs
            .iter()
            .map(|&(x, y)| (a.positions[x], b.positions[y]))
            .collect(),
    )?;
    let RansacResult {
        transform,
        inliers,
        inlier_count,
        inlier_ratio,
    } = match ransac_rigid(&corr, ransac) {
        Ok(r) => r,
        Err(Error::NoConsensus { inliers }) => return Ok(rejected(inliers, inliers as f64 / matches.len() as f64)),
        Err(Error::DegenerateCorrespondences(_)) => return Ok(rejected(0, 0.0)),
        Err(e) => return Err(e),
    };
    if inlier_count < thresholds.min_inliers || inlier_ratio < thresholds.min_ratio {
        return Ok(rejected(inlier_count, inlier_ratio));
    }
    let mut edge = Edge {
        matches: matches.clone(),
        inliers,
        transform,
        inlier_count,
        inlier_ratio,
        overlap,
    };
    if matches.edge.0 > matches.edge.1 {
        edge.matches = edge.matches.canonical();
        edge.transform = invert(&edge.transform);
    }
    Ok(Verification {
        inlier_count,
        inlier_ratio,
        edge: Some(edge),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapConfig {
    pub keypoints: KeypointConfig,
    /// Neighbour radius counting a point as overlapping after alignment.
    pub rho: f64,
    /// Number of independent coarse alignments; the best one is scored.
    pub hypotheses: usize,
    pub ransac: RansacConfig,
}

impl Default for OverlapConfig {
    fn default() -> Self {
        Self {
            keypoints: KeypointConfig {
                voxel: 0.1,
                normal_radius: 0.2,
                descriptor_radius: 0.5,
            },
            rho: 0.1,
            hypotheses: 3,
            ransac: RansacConfig {
                iterations: 1000,
                inlier_threshold: 0.15,
                seed: 0,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OverlapMethod {
    Builtin(OverlapConfig),
    Precomputed(DMatrix<f64>),
}

fn overlap_fraction(src: &[Point3], t: &RigidTransform, dst: &KdTree, rho: f64) -> f64 {
    if src.is_empty() {
        return 0.0;
    }
    let hit = src.iter().filter(|p| dst.has_neighbor_within(&t.apply(p), rho)).count();
    hit as f64 / src.len() as f64
}

fn builtin_pair_score(
    a: &KeypointSet,
    ta: &KdTree,
    b: &KeypointSet,
    tb: &KdTree,
    config: &OverlapConfig,
    seed: u64,
) -> Result<f64> {
    let m = match_features((0, 1), a, b, &MatchConfig::default())?;
    if m.len() < 3 {
        return Ok(0.0);
    }
    let corr = CorrespondenceSet::new(m.pairs.iter().map(|&(x, y)| (a.positions[x], b.positions[y])).collect())?;
    let mut best: f64 = 0.0;
    for h in 0..config.hypotheses.max(1) {
        let cfg = RansacConfig {
            seed: seed.wrapping_add(h as u64 * 7919),
            ..config.ransac
        };
        let Ok(res) = ransac_rigid(&corr, &cfg) else {
            continue;
        };
        let fwd = overlap_fraction(&a.positions, &res.transform, tb, config.rho);
        let bwd = overlap_fraction(&b.positions, &invert(&res.transform), ta, config.rho);
        best = best.max(0.5 * (fwd + bwd));
    }
    Ok(best)
}

/// Symmetric N×N overlap score matrix with zero diagonal, values in `[0, 1]`.
pub fn overlap_scores(scans: &[PointCloud], method: &OverlapMethod) -> Result<DMatrix<f64>> {
    match method {
        OverlapMethod::Precomputed(m) => {
            validate_score_matrix(m, scans.len().max(m.nrows()))?;
            if !scans.is_empty() && m.nrows() != scans.len() {
                return Err(Error::BadMatrixShape(format!(
                    "{}x{} matrix for {} scans",
                    m.nrows(),
                    m.ncols(),
                    scans.len()
                )));
            }
            Ok(m.clone())
        }
        OverlapMethod::Builtin(config) => {
            let n = scans.len();
            if n < 2 {
                return Err(Error::InvalidInput("need at least two scans".into()));
            }
            if scans.iter().any(PointCloud::is_empty) {
                return Err(Error::EmptyCloud);
            }
            let kps: Vec<KeypointSet> = scans
                .iter()
                .map(|c| extract_keypoints(c, &config.keypoints))
                .collect::<Result<_>>()?;
            let trees: Vec<KdTree> = kps.iter().map(|k| KdTree::new(&k.positions)).collect();
            let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
            let scores: Vec<f64> = pairs
                .par_iter()
                .map(|&(i, j)| {
                    builtin_pair_score(
                        &kps[i],
                        &trees[i],
                        &kps[j],
                        &trees[j],
                        config,
                        edge_seed(config.ransac.seed, i, j),
                    )
                })
                .collect::<Result<_>>()?;
            let mut m = DMatrix::zeros(n, n);
            for (&(i, j), s) in pairs.iter().zip(scores) {
                m[(i, j)] = s;
                m[(j, i)] = s;
            }
            Ok(m)
        }
    }
}

fn validate_score_matrix(m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() != n {
        return Err(Error::BadMatrixShape(format!(
            "expected {n}x{n}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    for i in 0..n {
        if m[(i, i)] != 0.0 {
            return Err(Error::BadMatrixShape("diagonal must be zero".into()));
        }
        for j in 0..n {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 || !m[(i, j)].is_finite() {
                return Err(Error::BadMatrixShape("matrix must be symmetric".into()));
            }
        }
    }
    Ok(())
}

/// Deterministic per-edge RANSAC seed.
pub fn edge_seed(seed: u64, i: usize, j: usize) -> u64 {
    seed ^ ((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
}

/// Per node, its `k` highest-scoring partners (ties to the smaller index);
/// the union over nodes in canonical `i < j` order.
pub fn propose_edges(scores: &DMatrix<f64>, k: usize) -> Vec<(usize, usize)> {
    let n = scores.nrows();
    let mut out = BTreeSet::new();
    for i in 0..n {
        let mut partners: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        partners.sort_by(|&a, &b| scores[(i, b)].total_cmp(&scores[(i, a)]).then(a.cmp(&b)));
        for &j in partners.iter().take(k) {
            out.insert((i.min(j), i.max(j)));
        }
    }
    out.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphConfig {
    /// Partners proposed per node.
    pub top_k: usize,
    pub verify: VerifyThresholds,
    pub ransac: RansacConfig,
    pub keypoints: KeypointConfig,
    pub matching: MatchConfig,
    pub overlap: OverlapConfig,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            verify: VerifyThresholds::default(),
            ransac: RansacConfig::default(),
            keypoints: KeypointConfig::default(),
            matching: MatchConfig::default(),
            overlap: OverlapConfig::default(),
        }
    }
}

impl GraphConfig {
    /// Proposes every pair.
    pub fn full(n: usize) -> Self {
        Self {
            top_k: n.saturating_sub(1).max(1),
            ..Self::default()
        }
    }
}

/// Everything `build_graph` may consume. Absent keypoints are extracted from
/// the clouds, absent matches come from descriptor matching and an absent
/// overlap matrix is computed geometrically.
#[derive(Clone, Debug, Default)]
pub struct GraphSources {
    pub clouds: Vec<PointCloud>,
    pub keypoints: Option<Vec<KeypointSet>>,
    /// Precomputed matches keyed by canonical `(i, j)`.
    pub matches: Option<BTreeMap<(usize, usize), MatchSet>>,
    pub overlap: Option<DMatrix<f64>>,
}

impl GraphSources {
    pub fn scan_count(&self) -> usize {
        self.keypoints
            .as_ref()
            .map_or(self.clouds.len(), Vec::len)
            .max(self.clouds.len())
    }
}

/// Summary of one proposed edge, accepted or not.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeReport {
    pub edge: (usize, usize),
    pub matches: usize,
    pub inlier_count: usize,
    pub inlier_ratio: f64,
    pub accepted: bool,
}

/// Overlap scoring → top-k proposal → keypoints → matching → verification.
pub fn build_graph(sources: &GraphSources, config: &GraphConfig) -> Result<ScanGraph> {
    build_graph_with_report(sources, config).map(|(g, _)| g)
}

pub fn build_graph_with_report(sources: &GraphSources, config: &GraphConfig) -> Result<(ScanGraph, Vec<EdgeReport>)> {
    let n = sources.scan_count();
    if n < 2 {
        return Err(Error::InvalidInput("need at least two scans".into()));
    }
    if !sources.clouds.is_empty() && sources.clouds.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} clouds for {n} scans",
            sources.clouds.len()
        )));
    }
    let scores = match &sources.overlap {
        Some(m) => overlap_scores(&sources.clouds, &OverlapMethod::Precomputed(m.clone()))?,
        None if sources.clouds.is_empty() => {
            return Err(Error::InvalidInput(
                "overlap scores need either clouds or a precomputed matrix".into(),
            ))
        }
        None => overlap_scores(&sources.clouds, &OverlapMethod::Builtin(config.overlap.clone()))?,
    };
    let proposed = propose_edges(&scores, config.top_k);

    let nodes: Vec<KeypointSet> = match &sources.keypoints {
        Some(k) => k.clone(),
        None => sources
            .clouds
            .par_iter()
            .map(|c| extract_keypoints(c, &config.keypoints))
            .collect::<Result<_>>()?,
    };

    let results: Vec<(EdgeReport, Option<Edge>)> = proposed
        .par_iter()
        .map(|&(i, j)| -> Result<(EdgeReport, Option<Edge>)> {
            let matches = match &sources.matches {
                Some(all) => all
                    .get(&(i, j))
                    .cloned()
                    .unwrap_or(MatchSet::new((i, j), Vec::new(), None)?),
                None => match_features((i, j), &nodes[i], &nodes[j], &config.matching)?,
            };
            let ransac = RansacConfig {
                seed: edge_seed(config.ransac.seed, i, j),
                ..config.ransac
            };
            let v = geometric_verify(&matches, &nodes[i], &nodes[j], &config.verify, &ransac, scores[(i, j)])?;
            let report = EdgeReport {
                edge: (i, j),
                matches: matches.len(),
                inlier_count: v.inlier_count,
                inlier_ratio: v.inlier_ratio,
                accepted: v.edge.is_some(),
            };
            Ok((report, v.edge))
        })
        .collect::<Result<_>>()?;

    let mut graph = ScanGraph::new(nodes);
    let mut reports = Vec::with_capacity(results.len());
    for (report, edge) in results {
        if let Some(e) = edge {
            graph.insert_edge(e)?;
        }
        reports.push(report);
    }
    Ok((graph, reports))
}
