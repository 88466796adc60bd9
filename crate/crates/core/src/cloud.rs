use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{Point3, RigidTransform};
use crate::spatial::KdTree;

/// Raw scan geometry in its local frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        Self::with_normals(points, None)
    }

    pub fn with_normals(points: Vec<Point3>, normals: Option<Vec<Vector3<f64>>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if !points.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput("non-finite point".into()));
        }
        if let Some(n) = &normals {
            if n.len() != points.len() {
                return Err(Error::InvalidInput(format!(
                    "{} normals for {} points",
                    n.len(),
                    points.len()
                )));
            }
            if !n.iter().all(|v| (v.norm() - 1.0).abs() <= 1e-6) {
                return Err(Error::InvalidInput("normals must be unit length".into()));
            }
        }
        Ok(Self { points, normals })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies `t` to every point (and rotates normals).
    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| n.iter().map(|v| t.rotation * v).collect()),
        }
    }
}

/// Eigen-decomposition of a neighbourhood covariance, eigenvalues ascending.
#[derive(Clone, Copy, Debug)]
pub struct LocalShape {
    pub centroid: Point3,
    pub eigenvalues: Vector3<f64>,
    pub eigenvectors: Matrix3<f64>,
}

impl LocalShape {
    pub fn of(points: impl IntoIterator<Item = Point3>) -> Option<Self> {
        let pts: Vec<Point3> = points.into_iter().collect();
        if pts.is_empty() {
            return None;
        }
        let n = pts.len() as f64;
        let centroid = pts.iter().sum::<Point3>() / n;
        let mut cov = Matrix3::zeros();
        for p in &pts {
            let d = p - centroid;
            cov += d * d.transpose();
        }
        cov /= n;
        let eig = SymmetricEigen::new(cov);
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let eigenvalues = Vector3::new(
            eig.eigenvalues[idx[0]].max(0.0),
            eig.eigenvalues[idx[1]].max(0.0),
            eig.eigenvalues[idx[2]].max(0.0),
        );
        let eigenvectors = Matrix3::from_columns(&[
            eig.eigenvectors.column(idx[0]).into_owned(),
            eig.eigenvectors.column(idx[1]).into_owned(),
            eig.eigenvectors.column(idx[2]).into_owned(),
        ]);
        Some(Self {
            centroid,
            eigenvalues,
            eigenvectors,
        })
    }

    /// Direction of least variance.
    pub fn normal(&self) -> Vector3<f64> {
        self.eigenvectors.column(0).into()
    }
}

/// PCA normals from neighbours within `radius` (falling back to the 8 nearest
/// points when the ball is too sparse), flipped to face the local origin,
/// which is where the sensor sits in scan coordinates.
pub fn estimate_normals(points: &[Point3], tree: &KdTree, radius: f64) -> Vec<Vector3<f64>> {
    points
        .iter()
        .map(|p| {
            let mut nb = tree.within(p, radius);
            if nb.len() < 3 {
                nb = tree.knn(p, 8);
            }
            let shape = LocalShape::of(nb.iter().map(|&(i, _)| *tree.point(i)));
            let mut n = match shape {
                Some(s) if nb.len() >= 3 => s.normal(),
                _ => Vector3::z(),
            };
            if n.dot(&(-p)) < 0.0 {
                n = -n;
            }
            let len = n.norm();
            if len > 0.0 {
                n / len
            } else {
                Vector3::z()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(matches!(PointCloud::new(vec![]), Err(Error::EmptyCloud)));
        assert!(PointCloud::new(vec![Vector3::new(f64::NAN, 0.0, 0.0)]).is_err());
        let p = vec![Vector3::zeros(); 2];
        assert!(PointCloud::with_normals(p.clone(), Some(vec![Vector3::z()])).is_err());
        assert!(PointCloud::with_normals(p.clone(), Some(vec![Vector3::new(0.0, 0.0, 2.0); 2])).is_err());
        assert!(PointCloud::with_normals(p, Some(vec![Vector3::z(); 2])).is_ok());
    }

    #[test]
    fn plane_normals_face_origin() {
        let pts: Vec<Point3> = (0..400)
            .map(|i| Vector3::new((i % 20) as f64 * 0.05, (i / 20) as f64 * 0.05, 2.0))
            .collect();
        let tree = KdTree::new(&pts);
        let normals = estimate_normals(&pts, &tree, 0.12);
        for n in normals {
            assert!((n - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-9);
        }
    }
}
