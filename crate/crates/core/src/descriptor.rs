//! 33-bin fast point feature histograms.
//!
//! Each keypoint gets three 11-bin histograms of the Darboux-frame angles
//! between its normal and the normals/offsets of neighbours within the
//! descriptor radius, blended with the neighbours' own histograms weighted by
//! inverse distance.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::geometry::Point3;
use crate::spatial::KdTree;

pub const BINS_PER_FEATURE: usize = 11;
pub const DESCRIPTOR_DIM: usize = 3 * BINS_PER_FEATURE;

type Histogram = [f64; DESCRIPTOR_DIM];

/// Darboux-frame angle triple `(alpha, phi, theta)` of an oriented point pair.
fn pair_features(p1: &Point3, n1: &Vector3<f64>, p2: &Point3, n2: &Vector3<f64>) -> Option<[f64; 3]> {
    let mut d = p2 - p1;
    let dist = d.norm();
    if dist == 0.0 {
        return None;
    }
    let (mut n1, mut n2) = (*n1, *n2);
    let a1 = n1.dot(&d) / dist;
    let a2 = n2.dot(&d) / dist;
    let f3;
    if a1.abs().acos() > a2.abs().acos() {
        std::mem::swap(&mut n1, &mut n2);
        d = -d;
        f3 = -a2;
    } else {
        f3 = a1;
    }
    let v = d.cross(&n1);
    let vn = v.norm();
    if vn == 0.0 {
        return None;
    }
    let v = v / vn;
    let w = n1.cross(&v);
    let f2 = v.dot(&n2);
    let f1 = w.dot(&n2).atan2(n1.dot(&n2));
    Some([f1, f2, f3])
}

fn bin(value: f64, lo: f64, hi: f64) -> usize {
    let b = ((value - lo) / (hi - lo) * BINS_PER_FEATURE as f64).floor();
    (b.max(0.0) as usize).min(BINS_PER_FEATURE - 1)
}

fn spfh(tree: &KdTree, normals: &[Vector3<f64>], i: usize, neighbors: &[(usize, f64)]) -> Histogram {
    let mut h = [0.0; DESCRIPTOR_DIM];
    let p = tree.point(i);
    let mut count = 0usize;
    let feats: Vec<[f64; 3]> = neighbors
        .iter()
        .filter(|&&(j, _)| j != i)
        .filter_map(|&(j, _)| pair_features(p, &normals[i], tree.point(j), &normals[j]))
        .collect();
    for f in &feats {
        h[bin(f[0], -std::f64::consts::PI, std::f64::consts::PI)] += 1.0;
        h[BINS_PER_FEATURE + bin(f[1], -1.0, 1.0)] += 1.0;
        h[2 * BINS_PER_FEATURE + bin(f[2], -1.0, 1.0)] += 1.0;
        count += 1;
    }
    if count > 0 {
        let s = 100.0 / count as f64;
        h.iter_mut().for_each(|v| *v *= s);
    }
    h
}

/// Descriptors for every point of `tree` (which must hold the keypoints
/// themselves), given per-point normals.
pub fn fpfh(tree: &KdTree, normals: &[Vector3<f64>], radius: f64) -> Vec<Vec<f64>> {
    let n = tree.len();
    let neighbors: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| tree.within(tree.point(i), radius))
        .collect();
    let simple: Vec<Histogram> = (0..n)
        .into_par_iter()
        .map(|i| spfh(tree, normals, i, &neighbors[i]))
        .collect();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut out = simple[i];
            let mut k = 0usize;
            let mut acc = [0.0; DESCRIPTOR_DIM];
            for &(j, d2) in &neighbors[i] {
                if j == i || d2 == 0.0 {
                    continue;
                }
                let w = 1.0 / d2.sqrt();
                for (a, s) in acc.iter_mut().zip(simple[j].iter()) {
                    *a += w * s;
                }
                k += 1;
            }
            if k > 0 {
                for (o, a) in out.iter_mut().zip(acc.iter()) {
                    *o += a / k as f64;
                }
            }
            // renormalise each sub-histogram to sum 100
            for f in 0..3 {
                let block = &mut out[f * BINS_PER_FEATURE..(f + 1) * BINS_PER_FEATURE];
                let s: f64 = block.iter().sum();
                if s > 0.0 {
                    block.iter_mut().for_each(|v| *v *= 100.0 / s);
                }
            }
            out.to_vec()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::estimate_normals;
    use crate::geometry::RigidTransform;

    fn bumpy_surface() -> Vec<Point3> {
        let mut pts = Vec::new();
        for i in 0..40 {
            for j in 0..40 {
                let x = i as f64 * 0.05;
                let y = j as f64 * 0.05;
                let z = 2.0 + 0.2 * (3.0 * x).sin() * (2.0 * y).cos();
                pts.push(Vector3::new(x, y, z));
            }
        }
        pts
    }

    #[test]
    fn histograms_are_normalised() {
        let pts = bumpy_surface();
        let tree = KdTree::new(&pts);
        let normals = estimate_normals(&pts, &tree, 0.12);
        let d = fpfh(&tree, &normals, 0.21);
        assert_eq!(d.len(), pts.len());
        for h in &d {
            assert_eq!(h.len(), DESCRIPTOR_DIM);
            let s: f64 = h[..BINS_PER_FEATURE].iter().sum();
            assert!((s - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn invariant_to_rigid_motion() {
        let pts = bumpy_surface();
        let tree = KdTree::new(&pts);
        let normals = estimate_normals(&pts, &tree, 0.12);
        let d = fpfh(&tree, &normals, 0.21);

        // small motion so normal orientation toward the origin is preserved
        let t = RigidTransform::from_axis_angle(&Vector3::new(0.2, 0.5, 1.0), 0.3, Vector3::new(0.1, -0.2, 0.05));
        let moved: Vec<Point3> = pts.iter().map(|p| t.apply(p)).collect();
        let mtree = KdTree::new(&moved);
        let mnormals: Vec<_> = normals.iter().map(|n| t.rotation * n).collect();
        let md = fpfh(&mtree, &mnormals, 0.21);
        for (a, b) in d.iter().zip(md.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
