//! File formats.
//!
//! * Manifest (TOML): `[[scan]]` tables with `id`, `cloud` and optional
//!   `keypoints`, plus optional top-level `matches`, `overlap` and
//!   `ground_truth` paths. Relative paths resolve against the manifest.
//! * Keypoints: one `x y z [d1 .. dn]` line per keypoint.
//! * Matches: one `i j a b [score]` line per correspondence.
//! * Overlap: `n` whitespace-separated rows of `n` numbers.
//! * Poses: `scan component r00 r01 r02 r10 .. r22 tx ty tz` per scan, then
//!   an `unregistered` line listing scans in no component.
//! * Graph and model dumps: JSON.
//! * Track dump: indented text, one block per track.
//!
//! Text formats accept blank lines and `#` comments.

pub mod ply;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::engine::{ModelStats, RegistrationModel, Stage};
use crate::error::{at, Error, Result};
use crate::eval::GroundTruth;
use crate::geometry::{Point3, RigidTransform};
use crate::graph::{Edge, GraphSources, KeypointSet, MatchSet, ScanGraph};
use crate::refine::DenseMatches;
use crate::synth::SyntheticScene;
use crate::tracks::{residual, Observation, PoseMap, TrackStatus, TrackStore};

pub use ply::{read_ply, write_ply, PlyEncoding};

fn parse_err(origin: &str, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{origin}:{line}: {msg}"))
}

/// Non-empty, non-comment lines with their 1-based numbers.
fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(n, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then(|| (n + 1, l.split_whitespace().collect()))
    })
}

fn number<T: std::str::FromStr>(origin: &str, line: usize, tok: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| parse_err(origin, line, format!("cannot parse `{tok}`")))
}

fn finite(origin: &str, line: usize, tok: &str) -> Result<f64> {
    let v: f64 = number(origin, line, tok)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(parse_err(origin, line, format!("non-finite value `{tok}`")))
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(at(path))
}

// ---------------------------------------------------------------- manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanEntry {
    pub id: usize,
    pub cloud: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, rename = "scan")]
    pub scans: Vec<ScanEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matches: Option<PathBuf>,
    /// Point-to-point matches from a detector-free matcher.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_matches: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
        let ids: Vec<usize> = m.scans.iter().map(|s| s.id).collect();
        if ids != (0..ids.len()).collect::<Vec<_>>() {
            return Err(Error::Parse("manifest: scan ids must be 0, 1, 2, ... in order".into()));
        }
        if m.scans.is_empty() {
            return Err(Error::Parse("manifest: no scans".into()));
        }
        let with_kp = m.scans.iter().filter(|s| s.keypoints.is_some()).count();
        if with_kp != 0 && with_kp != m.scans.len() {
            return Err(Error::Parse(
                "manifest: keypoints must be given for every scan or none".into(),
            ));
        }
        Ok(m)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Copy with every path resolved against `base`.
    pub fn resolved(&self, base: &Path) -> Self {
        let r = |p: &PathBuf| base.join(p);
        Self {
            scans: self
                .scans
                .iter()
                .map(|s| ScanEntry {
                    id: s.id,
                    cloud: r(&s.cloud),
                    keypoints: s.keypoints.as_ref().map(r),
                })
                .collect(),
            matches: self.matches.as_ref().map(r),
            dense_matches: self.dense_matches.as_ref().map(r),
            overlap: self.overlap.as_ref().map(r),
            ground_truth: self.ground_truth.as_ref().map(r),
        }
    }
}

/// Everything a manifest points at, loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clouds: Vec<PointCloud>,
    pub keypoints: Option<Vec<KeypointSet>>,
    pub matches: Option<BTreeMap<(usize, usize), MatchSet>>,
    pub dense_matches: Option<DenseMatches>,
    pub overlap: Option<DMatrix<f64>>,
    pub ground_truth: Option<GroundTruth>,
}

impl Dataset {
    pub fn sources(&self) -> GraphSources {
        GraphSources {
            clouds: self.clouds.clone(),
            keypoints: self.keypoints.clone(),
            matches: self.matches.clone(),
            overlap: self.overlap.clone(),
        }
    }
}

pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let m = Manifest::parse(&read_text(manifest)?)?.resolved(base);
    let n = m.scans.len();
    let clouds = m.scans.iter().map(|s| read_ply(&s.cloud)).collect::<Result<Vec<_>>>()?;
    let keypoints = if m.scans[0].keypoints.is_some() {
        Some(
            m.scans
                .iter()
                .map(|s| read_keypoints(s.keypoints.as_ref().expect("checked by parse")))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let matches = m.matches.as_deref().map(read_matches).transpose()?;
    if let Some(ms) = &matches {
        for m in ms.values() {
            if m.edge.1 >= n {
                return Err(Error::InvalidInput(format!(
                    "match file names scan {} of {n}",
                    m.edge.1
                )));
            }
            if let Some(kp) = &keypoints {
                m.check_range(&kp[m.edge.0], &kp[m.edge.1])?;
            }
        }
    }
    let dense_matches = m.dense_matches.as_deref().map(read_dense_matches).transpose()?;
    if let Some(bad) = dense_matches
        .iter()
        .flat_map(|d| d.keys())
        .map(|k| k.1)
        .find(|&j| j >= n)
    {
        return Err(Error::InvalidInput(format!("dense match file names scan {bad} of {n}")));
    }
    let overlap = m.overlap.as_deref().map(read_overlap).transpose()?;
    if let Some(o) = &overlap {
        if o.nrows() != n {
            return Err(Error::DimensionMismatch {
                left: o.nrows(),
                right: n,
            });
        }
    }
    let ground_truth = m
        .ground_truth
        .as_deref()
        .map(|p| read_poses(p).map(|f| GroundTruth { poses: f.merged() }))
        .transpose()?;
    Ok(Dataset {
        clouds,
        keypoints,
        matches,
        dense_matches,
        overlap,
        ground_truth,
    })
}

// --------------------------------------------------------------- keypoints

pub fn parse_keypoints(text: &str, origin: &str) -> Result<KeypointSet> {
    let mut positions = Vec::new();
    let mut descriptors = Vec::new();
    let mut dim = None;
    for (n, toks) in records(text) {
        if toks.len() < 3 {
            return Err(parse_err(origin, n, "expected x y z [descriptor..]"));
        }
        let v = toks
            .iter()
            .map(|t| finite(origin, n, t))
            .collect::<Result<Vec<f64>>>()?;
        if *dim.get_or_insert(v.len() - 3) != v.len() - 3 {
            return Err(parse_err(origin, n, "descriptor length differs from earlier lines"));
        }
        positions.push(Vector3::new(v[0], v[1], v[2]));
        descriptors.push(v[3..].to_vec());
    }
    KeypointSet::new(positions, descriptors)
}

pub fn read_keypoints(path: &Path) -> Result<KeypointSet> {
    parse_keypoints(&read_text(path)?, &path.display().to_string())
}

pub fn format_keypoints(kp: &KeypointSet) -> String {
    let mut out = String::from("# x y z descriptor...\n");
    for (p, d) in kp.positions.iter().zip(&kp.descriptors) {
        let _ = write!(out, "{} {} {}", p.x, p.y, p.z);
        for v in d {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}

// ----------------------------------------------------------------- matches

/// Groups match lines by scan pair. Lines for `(j, i)` with `j > i` are
/// flipped into canonical order. An edge carries scores only when every
/// one of its lines has one.
pub fn parse_matches(text: &str, origin: &str) -> Result<BTreeMap<(usize, usize), MatchSet>> {
    type Lines = (Vec<(usize, usize)>, Vec<Option<f64>>);
    let mut grouped: BTreeMap<(usize, usize), Lines> = BTreeMap::new();
    for (n, toks) in records(text) {
        if !(4..=5).contains(&toks.len()) {
            return Err(parse_err(origin, n, "expected i j a b [score]"));
        }
        let mut idx = [0usize; 4];
        for (k, v) in idx.iter_mut().enumerate() {
            *v = number(origin, n, toks[k])?;
        }
        let [i, j, a, b] = idx;
        if i == j {
            return Err(parse_err(origin, n, "a scan cannot match itself"));
        }
        let score = toks.get(4).map(|t| finite(origin, n, t)).transpose()?;
        let (key, pair) = if i < j { ((i, j), (a, b)) } else { ((j, i), (b, a)) };
        let e = grouped.entry(key).or_default();
        e.0.push(pair);
        e.1.push(score);
    }
    grouped
        .into_iter()
        .map(|(k, (pairs, scores))| {
            let scores = scores
                .iter()
                .all(Option::is_some)
                .then(|| scores.into_iter().flatten().collect());
            MatchSet::new(k, pairs, scores).map(|m| (k, m))
        })
        .collect()
}

pub fn read_matches(path: &Path) -> Result<BTreeMap<(usize, usize), MatchSet>> {
    parse_matches(&read_text(path)?, &path.display().to_string())
}

pub fn format_matches<'a>(sets: impl IntoIterator<Item = &'a MatchSet>) -> String {
    let mut out = String::from("# i j a b score\n");
    for m in sets {
        let (i, j) = m.edge;
        for (k, (a, b)) in m.pairs.iter().enumerate() {
            match &m.scores {
                Some(s) => {
                    let _ = writeln!(out, "{i} {j} {a} {b} {}", s[k]);
                }
                None => {
                    let _ = writeln!(out, "{i} {j} {a} {b}");
                }
            }
        }
    }
    out
}

// ----------------------------------------------------------- dense matches

/// Lines `i j ax ay az bx by bz`, points in each scan's own frame. Lines
/// for `(j, i)` with `j > i` are flipped into canonical order.
pub fn parse_dense_matches(text: &str, origin: &str) -> Result<DenseMatches> {
    let mut out = DenseMatches::new();
    for (n, toks) in records(text) {
        if toks.len() != 8 {
            return Err(parse_err(origin, n, "expected i j ax ay az bx by bz"));
        }
        let i: usize = number(origin, n, toks[0])?;
        let j: usize = number(origin, n, toks[1])?;
        if i == j {
            return Err(parse_err(origin, n, "a scan cannot match itself"));
        }
        let mut v = [0.0; 6];
        for (k, t) in toks[2..].iter().enumerate() {
            v[k] = finite(origin, n, t)?;
        }
        let a = Point3::new(v[0], v[1], v[2]);
        let b = Point3::new(v[3], v[4], v[5]);
        let (key, pair) = if i < j { ((i, j), (a, b)) } else { ((j, i), (b, a)) };
        out.entry(key).or_default().push(pair);
    }
    Ok(out)
}

pub fn read_dense_matches(path: &Path) -> Result<DenseMatches> {
    parse_dense_matches(&read_text(path)?, &path.display().to_string())
}

pub fn format_dense_matches(dense: &DenseMatches) -> String {
    let mut out = String::from("# i j ax ay az bx by bz\n");
    for (&(i, j), pairs) in dense {
        for (a, b) in pairs {
            let _ = writeln!(out, "{i} {j} {} {} {} {} {} {}", a.x, a.y, a.z, b.x, b.y, b.z);
        }
    }
    out
}

// ----------------------------------------------------------------- overlap

pub fn parse_overlap(text: &str, origin: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = records(text)
        .map(|(n, toks)| toks.iter().map(|t| finite(origin, n, t)).collect())
        .collect::<Result<_>>()?;
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Parse(format!("{origin}: overlap matrix must be square")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

pub fn read_overlap(path: &Path) -> Result<DMatrix<f64>> {
    parse_overlap(&read_text(path)?, &path.display().to_string())
}

pub fn format_overlap(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

// ------------------------------------------------------------------- poses

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PosesFile {
    /// Poses per component, indexed by component id.
    pub components: Vec<PoseMap>,
    pub unregistered: Vec<usize>,
}

impl PosesFile {
    /// All poses in one map, ignoring components.
    pub fn merged(&self) -> PoseMap {
        self.components.iter().flatten().map(|(s, t)| (*s, *t)).collect()
    }
}

pub fn format_poses(components: &[PoseMap], unregistered: &[usize]) -> String {
    let mut rows: Vec<(usize, usize, &RigidTransform)> = components
        .iter()
        .enumerate()
        .flat_map(|(c, m)| m.iter().map(move |(s, t)| (*s, c, t)))
        .collect();
    rows.sort_by_key(|r| r.0);
    let mut out = String::from("# scan component r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz\n");
    for (s, c, t) in rows {
        let _ = write!(out, "{s} {c}");
        for v in t.to_row_major() {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out.push_str("unregistered");
    for s in unregistered {
        let _ = write!(out, " {s}");
    }
    out.push('\n');
    out
}

pub fn parse_poses(text: &str, origin: &str) -> Result<PosesFile> {
    let mut file = PosesFile::default();
    let mut seen = BTreeSet::new();
    for (n, toks) in records(text) {
        if toks[0] == "unregistered" {
            for t in &toks[1..] {
                let s: usize = number(origin, n, t)?;
                if !seen.insert(s) {
                    return Err(parse_err(origin, n, format!("scan {s} listed twice")));
                }
                file.unregistered.push(s);
            }
            continue;
        }
        if toks.len() != 14 {
            return Err(parse_err(origin, n, "expected scan, component and 12 numbers"));
        }
        let s: usize = number(origin, n, toks[0])?;
        let c: usize = number(origin, n, toks[1])?;
        let mut v = [0.0; 12];
        for (k, t) in toks[2..].iter().enumerate() {
            v[k] = finite(origin, n, t)?;
        }
        let pose = loose_transform(&v);
        if !pose.is_valid(1e-6) {
            return Err(parse_err(origin, n, "rotation is not orthonormal"));
        }
        if !seen.insert(s) {
            return Err(parse_err(origin, n, format!("scan {s} listed twice")));
        }
        if file.components.len() <= c {
            file.components.resize(c + 1, PoseMap::new());
        }
        file.components[c].insert(s, snap(pose));
    }
    Ok(file)
}

pub fn read_poses(path: &Path) -> Result<PosesFile> {
    parse_poses(&read_text(path)?, &path.display().to_string())
}

pub fn write_poses(path: &Path, components: &[PoseMap], unregistered: &[usize]) -> Result<()> {
    fs::write(path, format_poses(components, unregistered)).map_err(at(path))?;
    Ok(())
}

// ------------------------------------------------------------- graph dump

#[derive(Serialize, Deserialize)]
struct NodeDump {
    id: usize,
    keypoints: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct EdgeDump {
    i: usize,
    j: usize,
    rotation: [f64; 9],
    translation: [f64; 3],
    inlier_count: usize,
    inlier_ratio: f64,
    overlap: f64,
    pairs: Vec<(usize, usize)>,
    inliers: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GraphDump {
    nodes: Vec<NodeDump>,
    edges: Vec<EdgeDump>,
}

fn split_transform(t: &RigidTransform) -> ([f64; 9], [f64; 3]) {
    let v = t.to_row_major();
    let mut r = [0.0; 9];
    r.copy_from_slice(&v[..9]);
    (r, [v[9], v[10], v[11]])
}

/// Row-major `R | t` without the strict orthonormality check; callers
/// validate with their own tolerance.
fn loose_transform(v: &[f64; 12]) -> RigidTransform {
    RigidTransform {
        rotation: Matrix3::from_row_slice(&v[..9]),
        translation: Vector3::new(v[9], v[10], v[11]),
    }
}

/// Projects onto SO(3) only when the rotation misses the strict tolerance,
/// so exactly written poses read back bit for bit.
fn snap(pose: RigidTransform) -> RigidTransform {
    if pose.is_valid(1e-9) {
        pose
    } else {
        pose.orthonormalized()
    }
}

fn join_transform(r: &[f64; 9], t: &[f64; 3]) -> Result<RigidTransform> {
    let mut v = [0.0; 12];
    v[..9].copy_from_slice(r);
    v[9..].copy_from_slice(t);
    let pose = loose_transform(&v);
    if pose.is_valid(1e-6) {
        Ok(snap(pose))
    } else {
        Err(Error::Parse("transform is not a valid rigid motion".into()))
    }
}

fn arr(p: &Point3) -> [f64; 3] {
    [p.x, p.y, p.z]
}

fn vec3(a: &[f64; 3]) -> Point3 {
    Vector3::new(a[0], a[1], a[2])
}

/// Keypoint positions, edges, transforms (row-major) and statistics.
/// Descriptors are not stored.
pub fn format_graph(graph: &ScanGraph) -> String {
    let dump = GraphDump {
        nodes: graph
            .nodes
            .iter()
            .enumerate()
            .map(|(id, kp)| NodeDump {
                id,
                keypoints: kp.positions.iter().map(arr).collect(),
            })
            .collect(),
        edges: graph
            .edges
            .values()
            .map(|e| {
                let (rotation, translation) = split_transform(&e.transform);
                EdgeDump {
                    i: e.matches.edge.0,
                    j: e.matches.edge.1,
                    rotation,
                    translation,
                    inlier_count: e.inlier_count,
                    inlier_ratio: e.inlier_ratio,
                    overlap: e.overlap,
                    pairs: e.matches.pairs.clone(),
                    inliers: e
                        .inliers
                        .iter()
                        .enumerate()
                        .filter(|(_, b)| **b)
                        .map(|(k, _)| k)
                        .collect(),
                }
            })
            .collect(),
    };
    serde_json::to_string_pretty(&dump).expect("graph serializes")
}

pub fn parse_graph(text: &str) -> Result<ScanGraph> {
    let dump: GraphDump = serde_json::from_str(text).map_err(|e| Error::Parse(format!("graph: {e}")))?;
    if dump.nodes.iter().enumerate().any(|(k, n)| n.id != k) {
        return Err(Error::Parse("graph: node ids must be 0, 1, 2, ... in order".into()));
    }
    let nodes = dump
        .nodes
        .iter()
        .map(|n| KeypointSet::positions_only(n.keypoints.iter().map(vec3).collect()))
        .collect();
    let mut graph = ScanGraph::new(nodes);
    for e in dump.edges {
        if e.i >= e.j || e.j >= graph.node_count() {
            return Err(Error::Parse(format!("graph: bad edge ({}, {})", e.i, e.j)));
        }
        let matches = MatchSet::new((e.i, e.j), e.pairs, None)?;
        matches.check_range(&graph.nodes[e.i], &graph.nodes[e.j])?;
        let mut inliers = vec![false; matches.len()];
        for k in e.inliers {
            *inliers
                .get_mut(k)
                .ok_or_else(|| Error::Parse(format!("graph: inlier index {k} out of range")))? = true;
        }
        graph.insert_edge(Edge {
            matches,
            inliers,
            transform: join_transform(&e.rotation, &e.translation)?,
            inlier_count: e.inlier_count,
            inlier_ratio: e.inlier_ratio,
            overlap: e.overlap,
        })?;
    }
    Ok(graph)
}

pub fn read_graph(path: &Path) -> Result<ScanGraph> {
    parse_graph(&read_text(path)?)
}

pub fn write_graph(path: &Path, graph: &ScanGraph) -> Result<()> {
    fs::write(path, format_graph(graph)).map_err(at(path))?;
    Ok(())
}

// ------------------------------------------------------------- model dump

#[derive(Serialize, Deserialize)]
struct PoseDump {
    scan: usize,
    rotation: [f64; 9],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct ObservationDump {
    scan: usize,
    keypoint: usize,
    point: [f64; 3],
    residual: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TrackDump {
    id: usize,
    active: bool,
    landmark: [f64; 3],
    observations: Vec<ObservationDump>,
}

#[derive(Serialize, Deserialize)]
struct ModelDump {
    component: usize,
    stage: Stage,
    order: Vec<usize>,
    poses: Vec<PoseDump>,
    tracks: Vec<TrackDump>,
    stats: ModelStats,
}

#[derive(Serialize, Deserialize)]
struct ModelsDump {
    models: Vec<ModelDump>,
    unregistered: Vec<usize>,
}

fn dump_model(m: &RegistrationModel) -> ModelDump {
    ModelDump {
        component: m.component,
        stage: m.stage,
        order: m.order.clone(),
        poses: m
            .poses
            .iter()
            .map(|(s, t)| {
                let (rotation, translation) = split_transform(t);
                PoseDump {
                    scan: *s,
                    rotation,
                    translation,
                }
            })
            .collect(),
        tracks: m
            .tracks
            .tracks()
            .iter()
            .enumerate()
            .map(|(id, t)| TrackDump {
                id,
                active: t.is_active(),
                landmark: arr(&t.landmark),
                observations: t
                    .observations
                    .iter()
                    .map(|o| ObservationDump {
                        scan: o.scan,
                        keypoint: o.keypoint,
                        point: arr(&o.point),
                        residual: m.poses.get(&o.scan).map(|p| residual(&t.landmark, p, &o.point)),
                    })
                    .collect(),
            })
            .collect(),
        stats: m.stats.clone(),
    }
}

fn undump_model(d: ModelDump) -> Result<RegistrationModel> {
    let mut poses = PoseMap::new();
    for p in &d.poses {
        poses.insert(p.scan, join_transform(&p.rotation, &p.translation)?);
    }
    let mut tracks = TrackStore::new();
    for (k, t) in d.tracks.into_iter().enumerate() {
        if t.id != k {
            return Err(Error::Parse("model: track ids must be 0, 1, 2, ... in order".into()));
        }
        let obs = t
            .observations
            .iter()
            .map(|o| Observation::new(o.scan, o.keypoint, vec3(&o.point)))
            .collect();
        if t.active {
            tracks.insert(vec3(&t.landmark), obs)?;
        } else {
            tracks.insert_filtered(vec3(&t.landmark), obs);
        }
    }
    Ok(RegistrationModel {
        component: d.component,
        poses,
        tracks,
        order: d.order,
        stage: d.stage,
        stats: d.stats,
    })
}

/// Models with poses, tracks (observation residuals included) and stats.
pub fn format_models(models: &[RegistrationModel], unregistered: &[usize]) -> String {
    let dump = ModelsDump {
        models: models.iter().map(dump_model).collect(),
        unregistered: unregistered.to_vec(),
    };
    serde_json::to_string_pretty(&dump).expect("model serializes")
}

pub fn parse_models(text: &str) -> Result<(Vec<RegistrationModel>, Vec<usize>)> {
    let dump: ModelsDump = serde_json::from_str(text).map_err(|e| Error::Parse(format!("model: {e}")))?;
    let models = dump.models.into_iter().map(undump_model).collect::<Result<_>>()?;
    Ok((models, dump.unregistered))
}

pub fn read_models(path: &Path) -> Result<(Vec<RegistrationModel>, Vec<usize>)> {
    parse_models(&read_text(path)?)
}

pub fn write_models(path: &Path, models: &[RegistrationModel], unregistered: &[usize]) -> Result<()> {
    fs::write(path, format_models(models, unregistered)).map_err(at(path))?;
    Ok(())
}

// -------------------------------------------------------------- track dump

/// ```text
/// track 4 active landmark 1.5 0.25 -2
///   scan 0 keypoint 17 point 0.1 0.2 0.3 residual 0.0012
/// ```
pub fn format_tracks(store: &TrackStore, poses: &PoseMap) -> String {
    let mut out = String::new();
    for (id, t) in store.tracks().iter().enumerate() {
        let status = match t.status {
            TrackStatus::Active => "active",
            TrackStatus::Filtered => "filtered",
        };
        let q = t.landmark;
        let _ = writeln!(out, "track {id} {status} landmark {} {} {}", q.x, q.y, q.z);
        for o in &t.observations {
            let _ = write!(
                out,
                "  scan {} keypoint {} point {} {} {}",
                o.scan, o.keypoint, o.point.x, o.point.y, o.point.z
            );
            match poses.get(&o.scan) {
                Some(p) => {
                    let _ = writeln!(out, " residual {}", residual(&q, p, &o.point));
                }
                None => out.push('\n'),
            }
        }
    }
    out
}

// ----------------------------------------------------------------- export

/// Every posed cloud moved into the world frame, concatenated in scan order.
pub fn fuse_clouds(clouds: &[PointCloud], poses: &PoseMap) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let with_normals = poses
        .keys()
        .all(|s| clouds.get(*s).is_some_and(|c| c.normals.is_some()));
    for (s, pose) in poses {
        let cloud = clouds
            .get(*s)
            .ok_or_else(|| Error::InvalidInput(format!("no cloud for scan {s}")))?;
        let world = cloud.transformed(&pose.inverse());
        points.extend(world.points);
        if with_normals {
            normals.extend(world.normals.expect("checked above"));
        }
    }
    PointCloud::with_normals(points, with_normals.then_some(normals))
}

// ----------------------------------------------------------- scene output

/// Writes clouds, keypoints, matches, overlap, ground truth, optional dense
/// matches and a manifest into `dir`; returns the manifest path.
pub fn write_scene(
    dir: &Path,
    scene: &SyntheticScene,
    dense: Option<&DenseMatches>,
    encoding: PlyEncoding,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(at(dir))?;
    let mut manifest = Manifest::default();
    for (i, (cloud, kp)) in scene.clouds.iter().zip(&scene.keypoints).enumerate() {
        let cloud_name = PathBuf::from(format!("scan_{i:03}.ply"));
        let kp_name = PathBuf::from(format!("keypoints_{i:03}.txt"));
        write_ply(&dir.join(&cloud_name), cloud, encoding)?;
        fs::write(dir.join(&kp_name), format_keypoints(kp))?;
        manifest.scans.push(ScanEntry {
            id: i,
            cloud: cloud_name,
            keypoints: Some(kp_name),
        });
    }
    fs::write(dir.join("matches.txt"), format_matches(scene.matches.values()))?;
    fs::write(dir.join("overlap.txt"), format_overlap(&scene.overlap))?;
    let gt: Vec<PoseMap> = vec![scene.ground_truth.poses.clone()];
    write_poses(&dir.join("ground_truth.txt"), &gt, &[])?;
    if let Some(d) = dense {
        fs::write(dir.join("dense_matches.txt"), format_dense_matches(d))?;
        manifest.dense_matches = Some("dense_matches.txt".into());
    }
    manifest.matches = Some("matches.txt".into());
    manifest.overlap = Some("overlap.txt".into());
    manifest.ground_truth = Some("ground_truth.txt".into());
    let path = dir.join("manifest.toml");
    fs::write(&path, manifest.to_toml_string())?;
    Ok(path)
}
