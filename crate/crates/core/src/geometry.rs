//! SE(3) algebra, closed-form rigid alignment and the RANSAC wrapper used
//! wherever a 6-DoF transform is estimated.
//!
//! Convention: an absolute scan pose maps a world point `q` into scan-local
//! coordinates, `p = R q + t`. A relative edge transform `(R_ij, t_ij)` maps
//! scan-i coordinates into scan-j coordinates.

use nalgebra::{Matrix3, SymmetricEigen, Vector3, SVD};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// A rigid motion `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, checking orthonormality and `det = +1` within `1e-9`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self { rotation, translation };
        if !t.is_valid(1e-9) {
            return Err(Error::InvalidInput(format!(
                "not a proper rigid transform: R = {rotation:?}"
            )));
        }
        Ok(t)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation by `angle` radians about `axis` (normalised internally), then
    /// translation.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let n = axis.norm();
        let omega = if n > 0.0 { axis * (angle / n) } else { Vector3::zeros() };
        Self {
            rotation: so3_exp(&omega),
            translation,
        }
    }

    /// Row-major rotation entries followed by the translation.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Result<Self> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        Self::new(rotation, Vector3::new(v[9], v[10], v[11]))
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        if !r.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return false;
        }
        let defect = r.transpose() * r - Matrix3::identity();
        defect.amax() <= tol && (r.determinant() - 1.0).abs() <= tol
    }

    #[inline]
    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// Applies the inverse motion without forming it.
    #[inline]
    pub fn apply_inverse(&self, p: &Point3) -> Point3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn inverse(&self) -> Self {
        invert(self)
    }

    /// Origin of the local frame expressed in the outer frame, for a world→scan
    /// pose this is the scan position in world coordinates.
    pub fn center(&self) -> Point3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Re-projects the rotation onto SO(3).
    pub fn orthonormalized(&self) -> Self {
        Self {
            rotation: nearest_rotation(&self.rotation),
            translation: self.translation,
        }
    }
}

/// `(R_a R_b, R_a t_b + t_a)`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

/// `(Rᵀ, −Rᵀ t)`.
pub fn invert(t: &RigidTransform) -> RigidTransform {
    let rt = t.rotation.transpose();
    RigidTransform {
        rotation: rt,
        translation: -(rt * t.translation),
    }
}

/// Geodesic angle between the rotation parts, in `[0, π]`.
///
/// Evaluated as `atan2(sin, cos)` of the relative rotation so that small
/// angles keep full precision.
pub fn rotation_distance(a: &RigidTransform, b: &RigidTransform) -> f64 {
    rotation_angle(&(a.rotation.transpose() * b.rotation))
}

/// Rotation angle of a rotation matrix, in `[0, π]`.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let axis = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin = 0.5 * axis.norm();
    sin.atan2(cos).clamp(0.0, std::f64::consts::PI)
}

pub fn translation_distance(a: &RigidTransform, b: &RigidTransform) -> f64 {
    (a.translation - b.translation).norm()
}

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    if theta2 < 1e-24 {
        return Matrix3::identity() + k;
    }
    let theta = theta2.sqrt();
    let (a, b) = if theta < 1e-4 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of [`so3_exp`] for angles below π.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let theta = rotation_angle(r);
    let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < 1e-8 {
        return v * 0.5;
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // axis from the symmetric part: R + I = 2 k kᵀ near π
        let s = (r + Matrix3::identity()) * 0.5;
        let mut best = 0;
        for i in 1..3 {
            if s[(i, i)] > s[(best, best)] {
                best = i;
            }
        }
        let mut axis: Vector3<f64> = s.column(best).into();
        axis /= axis.norm();
        return axis * theta;
    }
    v * (theta / (2.0 * theta.sin()))
}

/// Closest rotation in the Frobenius sense (polar decomposition via SVD).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

/// Source/target point pairs with optional non-negative weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(Point3, Point3)>,
    pub weights: Option<Vec<f64>>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<(Point3, Point3)>) -> Result<Self> {
        Self::with_weights(pairs, None)
    }

    pub fn with_weights(pairs: Vec<(Point3, Point3)>, weights: Option<Vec<f64>>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidInput("empty correspondence set".into()));
        }
        if !pairs
            .iter()
            .all(|(s, t)| s.iter().chain(t.iter()).all(|v| v.is_finite()))
        {
            return Err(Error::InvalidInput("non-finite correspondence".into()));
        }
        if let Some(w) = &weights {
            if w.len() != pairs.len() {
                return Err(Error::InvalidInput(format!(
                    "{} weights for {} pairs",
                    w.len(),
                    pairs.len()
                )));
            }
            if !w.iter().all(|v| v.is_finite() && *v >= 0.0) {
                return Err(Error::InvalidInput("negative or non-finite weight".into()));
            }
        }
        Ok(Self { pairs, weights })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn weight(&self, k: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[k])
    }
}

/// Weighted least-squares rigid alignment of sources onto targets.
pub fn solve_rigid(corr: &CorrespondenceSet) -> Result<RigidTransform> {
    let idx: Vec<usize> = (0..corr.len()).collect();
    solve_rigid_subset(corr, &idx)
}

fn solve_rigid_subset(corr: &CorrespondenceSet, idx: &[usize]) -> Result<RigidTransform> {
    if idx.len() < 3 {
        return Err(Error::DegenerateCorrespondences(format!(
            "{} pairs, need at least 3",
            idx.len()
        )));
    }
    let mut wsum = 0.0;
    let mut cs = Vector3::zeros();
    let mut ct = Vector3::zeros();
    for &k in idx {
        let w = corr.weight(k);
        let (s, t) = &corr.pairs[k];
        wsum += w;
        cs += s * w;
        ct += t * w;
    }
    if wsum <= 0.0 {
        return Err(Error::DegenerateCorrespondences("zero total weight".into()));
    }
    cs /= wsum;
    ct /= wsum;

    let mut scatter = Matrix3::zeros();
    let mut cross = Matrix3::zeros();
    for &k in idx {
        let w = corr.weight(k);
        let (s, t) = &corr.pairs[k];
        let ds = s - cs;
        let dt = t - ct;
        scatter += ds * ds.transpose() * w;
        cross += ds * dt.transpose() * w;
    }

    let mut eig = SymmetricEigen::new(scatter).eigenvalues;
    eig.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    let scale = eig[0].max(0.0);
    if scale <= 1e-24 || eig[1] <= 1e-10 * scale {
        return Err(Error::DegenerateCorrespondences(
            "source points are coincident or collinear".into(),
        ));
    }

    let svd = SVD::new(cross, true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let translation = ct - rotation * cs;
    Ok(RigidTransform { rotation, translation })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Maximum residual (meters) for a pair to count as inlier.
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            inlier_threshold: 0.07,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacResult {
    pub transform: RigidTransform,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub inlier_ratio: f64,
}

impl RansacResult {
    pub fn inlier_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.inliers.iter().enumerate().filter_map(|(i, &b)| b.then_some(i))
    }
}

fn score(corr: &CorrespondenceSet, t: &RigidTransform, thr2: f64) -> (usize, f64) {
    let mut count = 0;
    let mut sum = 0.0;
    for (s, g) in &corr.pairs {
        let r2 = (t.apply(s) - g).norm_squared();
        if r2 <= thr2 {
            count += 1;
            sum += r2.sqrt();
        }
    }
    (count, sum)
}

fn mask(corr: &CorrespondenceSet, t: &RigidTransform, thr2: f64) -> Vec<bool> {
    corr.pairs
        .iter()
        .map(|(s, g)| (t.apply(s) - g).norm_squared() <= thr2)
        .collect()
}

/// Fixed-iteration RANSAC over minimal samples of three pairs.
///
/// The best hypothesis maximises the inlier count, ties going to the lower
/// mean inlier residual; the returned transform is re-solved on its inliers.
pub fn ransac_rigid(corr: &CorrespondenceSet, config: &RansacConfig) -> Result<RansacResult> {
    let n = corr.len();
    if n < 3 {
        return Err(Error::DegenerateCorrespondences(format!("{n} pairs, need at least 3")));
    }
    if config.inlier_threshold <= 0.0 || !config.inlier_threshold.is_finite() {
        return Err(Error::InvalidConfig("inlier threshold must be > 0".into()));
    }
    let thr2 = config.inlier_threshold * config.inlier_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(usize, f64, RigidTransform)> = None;

    for _ in 0..config.iterations {
        let s = sample(&mut rng, n, 3).into_vec();
        let Ok(hyp) = solve_rigid_subset(corr, &s) else {
            continue;
        };
        let (count, sum) = score(corr, &hyp, thr2);
        let mean = if count > 0 { sum / count as f64 } else { f64::INFINITY };
        let better = match &best {
            None => true,
            Some((bc, bm, _)) => count > *bc || (count == *bc && mean < *bm),
        };
        if better {
            best = Some((count, mean, hyp));
        }
    }

    let Some((count, _, hyp)) = best else {
        return Err(Error::NoConsensus { inliers: 0 });
    };
    if count < 3 {
        return Err(Error::NoConsensus { inliers: count });
    }

    let mut inliers = mask(corr, &hyp, thr2);
    let mut transform = hyp;
    for _ in 0..3 {
        let idx: Vec<usize> = (0..n).filter(|&i| inliers[i]).collect();
        let Ok(refit) = solve_rigid_subset(corr, &idx) else {
            break;
        };
        transform = refit;
        let next = mask(corr, &refit, thr2);
        if next == inliers || next.iter().filter(|&&b| b).count() < idx.len() {
            break;
        }
        inliers = next;
    }
    let inlier_count = inliers.iter().filter(|&&b| b).count();
    Ok(RansacResult {
        transform,
        inlier_count,
        inlier_ratio: inlier_count as f64 / n as f64,
        inliers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use std::f64::consts::PI;

    fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let t = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        RigidTransform::from_axis_angle(&axis, rng.random_range(0.0..PI), t)
    }

    fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                )
            })
            .collect()
    }

    #[test]
    fn identity_and_translation_cases() {
        let src = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let corr = CorrespondenceSet::new(src.iter().map(|p| (*p, *p)).collect()).unwrap();
        let t = solve_rigid(&corr).unwrap();
        assert_abs_diff_eq!(t.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(t.translation, Vector3::zeros(), epsilon = 1e-12);

        let shift = Vector3::new(1.0, 2.0, 3.0);
        let corr = CorrespondenceSet::new(src.iter().map(|p| (*p, p + shift)).collect()).unwrap();
        let t = solve_rigid(&corr).unwrap();
        assert_abs_diff_eq!(t.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(t.translation, shift, epsilon = 1e-12);
    }

    #[test]
    fn recovers_random_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt = random_transform(&mut rng);
        let pts = random_points(&mut rng, 50);
        let corr = CorrespondenceSet::new(pts.iter().map(|p| (*p, gt.apply(p))).collect()).unwrap();
        let t = solve_rigid(&corr).unwrap();
        assert!(rotation_distance(&t, &gt) < 1e-9);
        assert!(translation_distance(&t, &gt) < 1e-9);
    }

    #[test]
    fn mirrored_targets_never_yield_reflection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points(&mut rng, 20);
        let corr = CorrespondenceSet::new(pts.iter().map(|p| (*p, Vector3::new(-p.x, p.y, p.z))).collect()).unwrap();
        let t = solve_rigid(&corr).unwrap();
        assert_abs_diff_eq!(t.rotation.determinant(), 1.0, epsilon = 1e-12);
        assert!(t.is_valid(1e-9));
    }

    #[test]
    fn degenerate_inputs() {
        let line: Vec<_> = (0..5)
            .map(|i| {
                let p = Vector3::new(i as f64, 2.0 * i as f64, 0.0);
                (p, p)
            })
            .collect();
        assert!(matches!(
            solve_rigid(&CorrespondenceSet::new(line).unwrap()),
            Err(Error::DegenerateCorrespondences(_))
        ));
        let two = vec![(Vector3::zeros(), Vector3::zeros()); 2];
        let corr = CorrespondenceSet::new(two).unwrap();
        assert!(solve_rigid(&corr).is_err());
        assert!(matches!(
            ransac_rigid(&corr, &RansacConfig::default()),
            Err(Error::DegenerateCorrespondences(_))
        ));
    }

    #[test]
    fn weights_must_match() {
        let p = vec![(Vector3::zeros(), Vector3::zeros()); 3];
        assert!(CorrespondenceSet::with_weights(p.clone(), Some(vec![1.0])).is_err());
        assert!(CorrespondenceSet::with_weights(p, Some(vec![1.0, -1.0, 1.0])).is_err());
        assert!(CorrespondenceSet::new(vec![]).is_err());
    }

    #[test]
    fn weighted_solve_ignores_zero_weight_outlier() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gt = random_transform(&mut rng);
        let pts = random_points(&mut rng, 10);
        let mut pairs: Vec<_> = pts.iter().map(|p| (*p, gt.apply(p))).collect();
        pairs[0].1 += Vector3::new(5.0, 0.0, 0.0);
        let mut w = vec![1.0; 10];
        w[0] = 0.0;
        let t = solve_rigid(&CorrespondenceSet::with_weights(pairs, Some(w)).unwrap()).unwrap();
        assert!(rotation_distance(&t, &gt) < 1e-9);
    }

    #[test]
    fn ransac_clean_and_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_transform(&mut rng);
        let pts = random_points(&mut rng, 100);
        let clean: Vec<_> = pts.iter().map(|p| (*p, gt.apply(p))).collect();
        let res = ransac_rigid(
            &CorrespondenceSet::new(clean.clone()).unwrap(),
            &RansacConfig {
                iterations: 200,
                inlier_threshold: 0.05,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(res.inlier_ratio, 1.0);
        assert!(rotation_distance(&res.transform, &gt) < 1e-9);

        let mut noisy = clean;
        let mut truth = [true; 100];
        for (k, slot) in truth.iter_mut().enumerate().take(40) {
            noisy[k].1 = Vector3::new(
                rng.random_range(-8.0..8.0),
                rng.random_range(-8.0..8.0),
                rng.random_range(-8.0..8.0),
            );
            *slot = false;
        }
        let corr = CorrespondenceSet::new(noisy).unwrap();
        let cfg = RansacConfig {
            iterations: 5000,
            inlier_threshold: 0.05,
            seed: 9,
        };
        let res = ransac_rigid(&corr, &cfg).unwrap();
        let recovered = (0..100).filter(|&k| truth[k] && res.inliers[k]).count();
        assert!(recovered >= 58, "recovered {recovered}");
        let again = ransac_rigid(&corr, &cfg).unwrap();
        assert_eq!(again, res);
    }

    #[test]
    fn compose_and_invert_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_transform(&mut rng);
        let id = RigidTransform::identity();
        assert_eq!(compose(&t, &id), t);
        let e = compose(&t, &invert(&t));
        assert_abs_diff_eq!(e.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(e.translation, Vector3::zeros(), epsilon = 1e-12);
        let back = invert(&invert(&t));
        assert_abs_diff_eq!(back.rotation, t.rotation, epsilon = 1e-12);
        assert_abs_diff_eq!(back.translation, t.translation, epsilon = 1e-12);
        assert_eq!(invert(&id), id);
        let v = Vector3::new(1.0, -2.0, 0.5);
        assert_eq!(invert(&RigidTransform::from_translation(v)).translation, -v);

        let z = Vector3::z();
        let a = RigidTransform::from_axis_angle(&z, 30f64.to_radians(), Vector3::zeros());
        let b = RigidTransform::from_axis_angle(&z, 60f64.to_radians(), Vector3::zeros());
        let c = RigidTransform::from_axis_angle(&z, 90f64.to_radians(), Vector3::zeros());
        assert_abs_diff_eq!(compose(&a, &b).rotation, c.rotation, epsilon = 1e-12);
    }

    #[test]
    fn rotation_distance_cases() {
        let id = RigidTransform::identity();
        assert_eq!(rotation_distance(&id, &id), 0.0);
        let half = RigidTransform::from_axis_angle(&Vector3::z(), PI, Vector3::zeros());
        assert_abs_diff_eq!(rotation_distance(&id, &half), PI, epsilon = 1e-12);
        let five = RigidTransform::from_axis_angle(&Vector3::x(), 5f64.to_radians(), Vector3::zeros());
        assert_abs_diff_eq!(rotation_distance(&id, &five), 5f64.to_radians(), epsilon = 1e-9);
    }

    #[test]
    fn exp_log_roundtrip() {
        for omega in [
            Vector3::new(0.1, -0.2, 0.3),
            Vector3::new(1e-9, 0.0, 2e-9),
            Vector3::new(0.0, 3.0, 0.0),
        ] {
            let r = so3_exp(&omega);
            assert_abs_diff_eq!(so3_log(&r), omega, epsilon = 1e-9);
        }
        let r = so3_exp(&Vector3::new(0.0, 0.0, PI));
        assert_abs_diff_eq!(so3_log(&r).norm(), PI, epsilon = 1e-9);
    }

    #[test]
    fn nearest_rotation_repairs_drift() {
        let r = so3_exp(&Vector3::new(0.3, 0.1, -0.4));
        let drifted = r + Matrix3::from_element(1e-6);
        let fixed = RigidTransform {
            rotation: nearest_rotation(&drifted),
            translation: Vector3::zeros(),
        };
        assert!(fixed.is_valid(1e-12));
        assert_abs_diff_eq!(fixed.rotation, r, epsilon = 1e-5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn transform() -> impl Strategy<Value = RigidTransform> {
            (
                prop::array::uniform3(-1.0f64..1.0),
                0.0f64..PI,
                prop::array::uniform3(-3.0f64..3.0),
            )
                .prop_map(|(a, ang, t)| RigidTransform::from_axis_angle(&Vector3::from(a), ang, Vector3::from(t)))
        }

        proptest! {
            #[test]
            fn rotation_distance_is_a_metric(a in transform(), b in transform(), c in transform()) {
                let ab = rotation_distance(&a, &b);
                let ba = rotation_distance(&b, &a);
                prop_assert!((ab - ba).abs() < 1e-9);
                let ac = rotation_distance(&a, &c);
                let cb = rotation_distance(&c, &b);
                prop_assert!(ab <= ac + cb + 1e-9);
            }

            #[test]
            fn solve_rigid_is_exact(t in transform(), seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pts = random_points(&mut rng, 4);
                let corr = CorrespondenceSet::new(pts.iter().map(|p| (*p, t.apply(p))).collect()).unwrap();
                if let Ok(est) = solve_rigid(&corr) {
                    prop_assert!(rotation_distance(&est, &t) < 1e-9);
                    prop_assert!(translation_distance(&est, &t) < 1e-9);
                    prop_assert!(est.is_valid(1e-9));
                }
            }
        }
    }
}
