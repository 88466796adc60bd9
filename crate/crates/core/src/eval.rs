//! Accuracy metrics against ground-truth poses: gauge alignment, registration
//! recall and ECDF tables.
//!
//! Rotation errors are geodesic angles; translation errors are distances
//! between scan centres in the world frame.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{compose, nearest_rotation, rotation_distance, RigidTransform};
use crate::tracks::PoseMap;

pub const DEFAULT_ROTATION_THRESHOLDS_DEG: [f64; 5] = [3.0, 5.0, 10.0, 30.0, 45.0];
pub const DEFAULT_TRANSLATION_THRESHOLDS: [f64; 5] = [0.05, 0.1, 0.25, 0.5, 0.75];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub poses: PoseMap,
}

/// Applies the rigid change of world frame that best maps `est` onto `gt`
/// over their common scans. Rotation is the polar factor of `Σ R_eᵀ R_g`;
/// translation is the least-squares fit of scan centres.
pub fn gauge_align(est: &PoseMap, gt: &PoseMap) -> Result<PoseMap> {
    let common: Vec<usize> = est.keys().filter(|s| gt.contains_key(s)).copied().collect();
    if common.is_empty() {
        return Err(Error::NoCommonScans);
    }
    let m = common
        .iter()
        .map(|s| est[s].rotation.transpose() * gt[s].rotation)
        .sum();
    let rg = nearest_rotation(&m);
    // centre of est∘G is Rgᵀ(c_e − t) which should equal c_g
    let t = common
        .iter()
        .map(|s| est[s].center() - rg * gt[s].center())
        .sum::<nalgebra::Vector3<f64>>()
        / common.len() as f64;
    let g = RigidTransform {
        rotation: rg,
        translation: t,
    };
    Ok(est.iter().map(|(s, p)| (*s, compose(p, &g))).collect())
}

/// Mean world-frame displacement of a scan's points between two placements.
pub fn mean_point_error(est: &RigidTransform, gt: &RigidTransform, cloud: &PointCloud) -> f64 {
    let sum: f64 = cloud
        .points
        .iter()
        .map(|p| (est.apply_inverse(p) - gt.apply_inverse(p)).norm())
        .sum();
    sum / cloud.len() as f64
}

/// Fraction of ground-truth scans whose mean point error is below
/// `threshold`; scans missing from `est` count as failures.
pub fn registration_recall(est: &PoseMap, gt: &PoseMap, clouds: &[PointCloud], threshold: f64) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let ok = gt
        .iter()
        .filter(|(s, g)| match (est.get(s), clouds.get(**s)) {
            (Some(e), Some(c)) => mean_point_error(e, g, c) < threshold,
            _ => false,
        })
        .count();
    ok as f64 / gt.len() as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ecdf {
    pub thresholds: Vec<f64>,
    /// Fraction of samples strictly below each threshold; empty when there
    /// are no samples.
    pub fractions: Vec<f64>,
    pub samples: usize,
}

impl Ecdf {
    pub fn is_defined(&self) -> bool {
        self.samples > 0
    }
}

pub fn ecdf(errors: &[f64], thresholds: &[f64]) -> Ecdf {
    let fractions = if errors.is_empty() {
        Vec::new()
    } else {
        thresholds
            .iter()
            .map(|t| errors.iter().filter(|e| *e < t).count() as f64 / errors.len() as f64)
            .collect()
    };
    Ecdf {
        thresholds: thresholds.to_vec(),
        fractions,
        samples: errors.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub recall_threshold: f64,
    pub rotation_thresholds_deg: Vec<f64>,
    pub translation_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            recall_threshold: 0.2,
            rotation_thresholds_deg: DEFAULT_ROTATION_THRESHOLDS_DEG.to_vec(),
            translation_thresholds: DEFAULT_TRANSLATION_THRESHOLDS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanError {
    pub scan: usize,
    pub component: usize,
    /// Radians.
    pub rotation_error: f64,
    pub translation_error: f64,
    pub mean_point_error: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scans: Vec<ScanError>,
    pub recall: f64,
    pub recall_threshold: f64,
    pub rotation_ecdf: Ecdf,
    pub translation_ecdf: Ecdf,
    pub unregistered: Vec<usize>,
}

impl EvaluationReport {
    pub fn mean_rotation_error(&self) -> Option<f64> {
        mean(self.scans.iter().map(|s| s.rotation_error))
    }

    pub fn max_rotation_error(&self) -> Option<f64> {
        self.scans.iter().map(|s| s.rotation_error).reduce(f64::max)
    }

    pub fn mean_translation_error(&self) -> Option<f64> {
        mean(self.scans.iter().map(|s| s.translation_error))
    }

    pub fn max_translation_error(&self) -> Option<f64> {
        self.scans.iter().map(|s| s.translation_error).reduce(f64::max)
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = v.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

/// Gauge-aligns every component independently and scores all scans of the
/// ground truth. Unregistered scans count as failures in recall and in the
/// ECDF tables. `clouds` may be empty, in which case recall uses the scan
/// centres as single-point clouds.
pub fn evaluate(
    components: &[PoseMap],
    gt: &GroundTruth,
    clouds: &[PointCloud],
    config: &EvalConfig,
) -> Result<EvaluationReport> {
    let mut scans = Vec::new();
    let mut aligned_all: PoseMap = BTreeMap::new();
    for (c, est) in components.iter().enumerate() {
        let est: PoseMap = est
            .iter()
            .filter(|(s, _)| gt.poses.contains_key(s))
            .map(|(s, p)| (*s, *p))
            .collect();
        if est.is_empty() {
            continue;
        }
        let aligned = gauge_align(&est, &gt.poses)?;
        for (s, p) in &aligned {
            let g = &gt.poses[s];
            scans.push(ScanError {
                scan: *s,
                component: c,
                rotation_error: rotation_distance(p, g),
                translation_error: (p.center() - g.center()).norm(),
                mean_point_error: clouds.get(*s).map(|cl| mean_point_error(p, g, cl)),
            });
            aligned_all.insert(*s, *p);
        }
    }
    scans.sort_by_key(|s| s.scan);
    let unregistered: Vec<usize> = gt
        .poses
        .keys()
        .filter(|s| !aligned_all.contains_key(s))
        .copied()
        .collect();

    let recall = if clouds.is_empty() {
        let passed = scans
            .iter()
            .filter(|s| s.translation_error < config.recall_threshold)
            .count();
        if gt.poses.is_empty() {
            0.0
        } else {
            passed as f64 / gt.poses.len() as f64
        }
    } else {
        registration_recall(&aligned_all, &gt.poses, clouds, config.recall_threshold)
    };

    let failures = std::iter::repeat_n(f64::INFINITY, unregistered.len());
    let rot: Vec<f64> = scans
        .iter()
        .map(|s| s.rotation_error.to_degrees())
        .chain(failures.clone())
        .collect();
    let trans: Vec<f64> = scans.iter().map(|s| s.translation_error).chain(failures).collect();
    Ok(EvaluationReport {
        recall,
        recall_threshold: config.recall_threshold,
        rotation_ecdf: ecdf(&rot, &config.rotation_thresholds_deg),
        translation_ecdf: ecdf(&trans, &config.translation_thresholds),
        scans,
        unregistered,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "txt" => Ok(Self::Text),
            "json" => Ok(Self::Json),
            other => Err(Error::InvalidInput(format!("unknown report format `{other}`"))),
        }
    }
}

fn text_report(r: &EvaluationReport) -> String {
    let mut out = String::new();
    if r.scans.is_empty() && r.unregistered.is_empty() {
        return out;
    }
    let _ = writeln!(out, "recall@{}m {:.6}", r.recall_threshold, r.recall);
    if let (Some(mr), Some(mt)) = (r.mean_rotation_error(), r.mean_translation_error()) {
        let _ = writeln!(out, "mean rotation error (deg) {:.6}", mr.to_degrees());
        let _ = writeln!(out, "mean translation error (m) {mt:.6}");
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:>6} {:>9} {:>12} {:>12} {:>12}",
        "scan", "component", "rot_deg", "trans_m", "point_m"
    );
    for s in &r.scans {
        let point = s.mean_point_error.map_or("-".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(
            out,
            "{:>6} {:>9} {:>12.6} {:>12.6} {:>12}",
            s.scan,
            s.component,
            s.rotation_error.to_degrees(),
            s.translation_error,
            point
        );
    }
    for (name, e) in [
        ("rotation ecdf (deg)", &r.rotation_ecdf),
        ("translation ecdf (m)", &r.translation_ecdf),
    ] {
        let _ = writeln!(out);
        let _ = writeln!(out, "{name}");
        if !e.is_defined() {
            let _ = writeln!(out, "  undefined (no samples)");
            continue;
        }
        for (t, f) in e.thresholds.iter().zip(&e.fractions) {
            let _ = writeln!(out, "  < {t:<6} {f:.6}");
        }
    }
    if !r.unregistered.is_empty() {
        let list: Vec<String> = r.unregistered.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "\nunregistered {}", list.join(" "));
    }
    out
}

/// Deterministic serialisation of a report.
pub fn emit_report(report: &EvaluationReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => text_report(report),
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serialises");
            s.push('\n');
            s
        }
    }
}

pub fn write_report(path: &std::path::Path, report: &EvaluationReport, format: ReportFormat) -> Result<()> {
    std::fs::write(path, emit_report(report, format)).map_err(crate::error::at(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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

    fn random_set(n: usize, seed: u64) -> PoseMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|s| (s, random_pose(&mut rng))).collect()
    }

    fn assert_close(a: &PoseMap, b: &PoseMap, tol: f64) {
        for (s, p) in a {
            assert!(rotation_distance(p, &b[s]) < tol);
            assert!((p.translation - b[s].translation).norm() < tol);
        }
    }

    #[test]
    fn gauge_examples() {
        let gt = random_set(5, 1);
        assert_close(&gauge_align(&gt, &gt).unwrap(), &gt, 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_pose(&mut rng);
        let moved: PoseMap = gt.iter().map(|(s, p)| (*s, compose(p, &g))).collect();
        assert_close(&gauge_align(&moved, &gt).unwrap(), &gt, 1e-9);

        assert!(matches!(gauge_align(&gt, &BTreeMap::new()), Err(Error::NoCommonScans)));
    }

    #[test]
    fn balanced_perturbations_survive_alignment() {
        let gt = random_set(4, 3);
        let shifts = [
            Vector3::new(0.1, 0.0, 0.0),
            Vector3::new(-0.1, 0.0, 0.0),
            Vector3::new(0.0, 0.2, 0.0),
            Vector3::new(0.0, -0.2, 0.0),
        ];
        // move each scan centre by its shift, keeping orientations
        let est: PoseMap = gt
            .iter()
            .map(|(s, p)| {
                let c = p.center() + shifts[*s];
                (
                    *s,
                    RigidTransform {
                        rotation: p.rotation,
                        translation: -(p.rotation * c),
                    },
                )
            })
            .collect();
        let a = gauge_align(&est, &gt).unwrap();
        for (s, p) in &a {
            assert!(((p.center() - gt[s].center()).norm() - shifts[*s].norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn alignment_is_idempotent() {
        let gt = random_set(6, 4);
        let est = random_set(6, 5);
        let once = gauge_align(&est, &gt).unwrap();
        let twice = gauge_align(&once, &gt).unwrap();
        assert_close(&once, &twice, 1e-12);
    }

    fn square_cloud() -> PointCloud {
        PointCloud::new(vec![
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1.0, 0.0, 1.0),
            Vector3::new(0.0, 1.0, 1.0),
        ])
        .unwrap()
    }

    #[test]
    fn recall_examples() {
        let gt = random_set(4, 6);
        let clouds = vec![square_cloud(); 4];
        assert_eq!(registration_recall(&gt, &gt, &clouds, 0.2), 1.0);

        let mut est = gt.clone();
        let p = est[&2];
        // one metre along the world x axis
        est.insert(
            2,
            compose(&p, &RigidTransform::from_translation(Vector3::new(-1.0, 0.0, 0.0))),
        );
        assert_eq!(registration_recall(&est, &gt, &clouds, 0.2), 0.75);

        assert_eq!(registration_recall(&BTreeMap::new(), &gt, &clouds, 0.2), 0.0);
    }

    #[test]
    fn ecdf_examples() {
        let t = DEFAULT_ROTATION_THRESHOLDS_DEG;
        assert_eq!(ecdf(&[0.0, 0.0], &t).fractions, vec![1.0; 5]);
        assert_eq!(
            ecdf(&[1.0, 4.0, 20.0], &t).fractions,
            vec![1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0, 1.0]
        );
        let empty = ecdf(&[], &t);
        assert!(!empty.is_defined());
        assert!(empty.fractions.is_empty());
    }

    #[test]
    fn unregistered_scans_cap_recall() {
        let gt = GroundTruth {
            poses: random_set(4, 7),
        };
        let clouds = vec![square_cloud(); 4];
        let part: PoseMap = gt.poses.iter().take(3).map(|(s, p)| (*s, *p)).collect();
        let cfg = EvalConfig {
            recall_threshold: f64::INFINITY,
            ..Default::default()
        };
        let r = evaluate(&[part], &gt, &clouds, &cfg).unwrap();
        assert_eq!(r.recall, 0.75);
        assert_eq!(r.unregistered, vec![3]);
        assert_eq!(r.rotation_ecdf.fractions, vec![0.75; 5]);
    }

    #[test]
    fn components_are_aligned_independently() {
        let gt = GroundTruth {
            poses: random_set(4, 8),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (g1, g2) = (random_pose(&mut rng), random_pose(&mut rng));
        let a: PoseMap = [0, 1].iter().map(|s| (*s, compose(&gt.poses[s], &g1))).collect();
        let b: PoseMap = [2, 3].iter().map(|s| (*s, compose(&gt.poses[s], &g2))).collect();
        let r = evaluate(&[a, b], &gt, &[], &EvalConfig::default()).unwrap();
        assert_eq!(r.recall, 1.0);
        assert!(r.max_rotation_error().unwrap() < 1e-9);
        assert_eq!(
            r.scans.iter().map(|s| s.component).collect::<Vec<_>>(),
            vec![0, 0, 1, 1]
        );
    }

    #[test]
    fn report_round_trip_and_stability() {
        assert_eq!(emit_report(&EvaluationReport::default(), ReportFormat::Text), "");
        let empty_json = emit_report(&EvaluationReport::default(), ReportFormat::Json);
        let _: EvaluationReport = serde_json::from_str(&empty_json).unwrap();

        let gt = GroundTruth {
            poses: random_set(4, 10),
        };
        let mut est = gt.poses.clone();
        let p = est[&1];
        est.insert(
            1,
            compose(&p, &RigidTransform::from_translation(Vector3::new(0.0, 3.0, 0.0))),
        );
        let clouds = vec![square_cloud(); 4];
        let r = evaluate(&[est], &gt, &clouds, &EvalConfig::default()).unwrap();
        let json = emit_report(&r, ReportFormat::Json);
        let back: EvaluationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.recall, r.recall);
        assert_eq!(emit_report(&r, ReportFormat::Text), emit_report(&r, ReportFormat::Text));
        assert_eq!(json, emit_report(&back, ReportFormat::Json));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ecdf_is_monotone(errors in proptest::collection::vec(0.0f64..100.0, 1..40)) {
                let e = ecdf(&errors, &DEFAULT_ROTATION_THRESHOLDS_DEG);
                prop_assert!(e.fractions.windows(2).all(|w| w[0] <= w[1]));
            }

            #[test]
            fn gauge_alignment_idempotent(seed in 0u64..1000) {
                let gt = random_set(5, seed);
                let est = random_set(5, seed + 7);
                let once = gauge_align(&est, &gt).unwrap();
                let twice = gauge_align(&once, &gt).unwrap();
                for (s, p) in &once {
                    prop_assert!(rotation_distance(p, &twice[s]) < 1e-12);
                    prop_assert!((p.translation - twice[s].translation).norm() < 1e-11);
                }
            }
        }
    }
}
