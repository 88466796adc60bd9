//! Nearest-neighbour search and voxel grids.
//!
//! Query results are ordered by distance with ties broken by point index, so
//! every consumer sees the same order on every run.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use crate::geometry::Point3;

const LEAF_SIZE: usize = 12;

#[derive(Clone, Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// A static 3-d tree over a point slice.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Point3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    pub fn new(points: &[Point3]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &Point3 {
        &self.points[index]
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = self.points[self.order[start]];
        let mut hi = lo;
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        if hi[axis] - lo[axis] <= 0.0 {
            // all points coincide
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Closest point and its squared distance.
    pub fn nearest(&self, query: &Point3) -> Option<(usize, f64)> {
        self.knn(query, 1).into_iter().next()
    }

    /// Up to `k` closest points, nearest first.
    pub fn knn(&self, query: &Point3, k: usize) -> Vec<(usize, f64)> {
        self.knn_within(query, k, f64::INFINITY)
    }

    /// Up to `k` closest points no farther than `radius`, nearest first.
    pub fn knn_within(&self, query: &Point3, k: usize, radius: f64) -> Vec<(usize, f64)> {
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        let limit = if radius.is_finite() {
            radius * radius
        } else {
            f64::INFINITY
        };
        self.knn_rec(0, query, k, limit, &mut heap);
        let mut out: Vec<_> = heap.into_iter().map(|c| (c.index, c.dist2)).collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    fn knn_rec(&self, node: usize, q: &Point3, k: usize, limit: f64, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate {
                        dist2: (self.points[i] - q).norm_squared(),
                        index: i,
                    };
                    if c.dist2 > limit {
                        continue;
                    }
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("non-empty") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near, q, k, limit, heap);
                let bound = diff * diff;
                let worst = if heap.len() < k {
                    limit
                } else {
                    heap.peek().expect("non-empty").dist2.min(limit)
                };
                if bound <= worst {
                    self.knn_rec(far, q, k, limit, heap);
                }
            }
        }
    }

    /// All points within `radius`, nearest first.
    pub fn within(&self, query: &Point3, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if self.is_empty() {
            return out;
        }
        self.within_rec(0, query, radius * radius, &mut out);
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    fn within_rec(&self, node: usize, q: &Point3, r2: f64, out: &mut Vec<(usize, f64)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = (self.points[i] - q).norm_squared();
                    if d2 <= r2 {
                        out.push((i, d2));
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.within_rec(near, q, r2, out);
                if diff * diff <= r2 {
                    self.within_rec(far, q, r2, out);
                }
            }
        }
    }

    /// True when some point lies within `radius`.
    pub fn has_neighbor_within(&self, query: &Point3, radius: f64) -> bool {
        !self.knn_within(query, 1, radius).is_empty()
    }
}

pub type VoxelKey = (i64, i64, i64);

pub fn voxel_key(p: &Point3, cell: f64) -> VoxelKey {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

/// Points bucketed by voxel cell; cells are iterated in key order.
#[derive(Clone, Debug)]
pub struct VoxelGrid {
    pub cell: f64,
    pub cells: BTreeMap<VoxelKey, Vec<usize>>,
}

impl VoxelGrid {
    pub fn new(points: &[Point3], cell: f64) -> Self {
        let mut cells: BTreeMap<VoxelKey, Vec<usize>> = BTreeMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(voxel_key(p, cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    pub fn occupied(&self) -> usize {
        self.cells.len()
    }

    pub fn centroids(&self, points: &[Point3]) -> Vec<Point3> {
        self.cells
            .values()
            .map(|ids| ids.iter().map(|&i| points[i]).sum::<Point3>() / ids.len() as f64)
            .collect()
    }
}

/// Cell centroids of a voxel grid with edge length `cell`.
pub fn voxel_downsample(points: &[Point3], cell: f64) -> Vec<Point3> {
    VoxelGrid::new(points, cell).centroids(points)
}
