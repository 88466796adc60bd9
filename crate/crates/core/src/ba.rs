//! Bundle adjustment over scan poses and landmarks.
//!
//! Minimises `E = Σ ρ(‖R_i q_j + t_i − p_ij‖²)` with Levenberg–Marquardt.
//! Pose increments are applied on the left, `R ← exp(ω) R`, `t ← t + v`, so
//! the residual Jacobians are `∂r/∂ω = −[R q]×`, `∂r/∂v = I`, `∂r/∂q = R`.
//! Landmark blocks are eliminated with the Schur complement.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6x3, SMatrix, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::geometry::{nearest_rotation, skew, so3_exp, Point3, RigidTransform};
use crate::tracks::{PoseMap, TrackId, TrackStore};

/// One observation term: `p` seen in `scan` of landmark `track`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualBlock {
    pub track: TrackId,
    pub scan: usize,
    pub point: Point3,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Loss {
    #[default]
    Squared,
    /// Huber on the residual norm with the given scale (m).
    Huber(f64),
}

impl Loss {
    /// `ρ(s)` for squared norm `s`.
    pub fn rho(&self, s: f64) -> f64 {
        match *self {
            Loss::Squared => s,
            Loss::Huber(d) => {
                if s <= d * d {
                    s
                } else {
                    2.0 * d * s.sqrt() - d * d
                }
            }
        }
    }

    /// IRLS weight `ρ'(s)`.
    pub fn weight(&self, s: f64) -> f64 {
        match *self {
            Loss::Squared => 1.0,
            Loss::Huber(d) => {
                if s <= d * d {
                    1.0
                } else {
                    d / s.sqrt()
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaProblem {
    pub poses: BTreeMap<usize, RigidTransform>,
    pub landmarks: BTreeMap<TrackId, Point3>,
    pub residuals: Vec<ResidualBlock>,
    pub fixed_poses: BTreeSet<usize>,
    pub fixed_landmarks: BTreeSet<TrackId>,
    /// Gauge anchor, held fixed by [`solve_global`].
    pub anchor: Option<usize>,
    pub loss: Loss,
}

impl BaProblem {
    /// Every observation of every active track whose scan is posed.
    pub fn from_tracks(store: &TrackStore, poses: &PoseMap, anchor: Option<usize>) -> Self {
        let mut problem = BaProblem {
            poses: poses.clone(),
            anchor,
            ..Default::default()
        };
        for (id, t) in store.active() {
            let blocks: Vec<ResidualBlock> = t
                .observations
                .iter()
                .filter(|o| poses.contains_key(&o.scan))
                .map(|o| ResidualBlock {
                    track: id,
                    scan: o.scan,
                    point: o.point,
                })
                .collect();
            if blocks.is_empty() {
                continue;
            }
            problem.landmarks.insert(id, t.landmark);
            problem.residuals.extend(blocks);
        }
        problem
    }

    /// Copies solved poses and landmarks back.
    pub fn write_back(&self, store: &mut TrackStore, poses: &mut PoseMap) {
        for (s, p) in &self.poses {
            if let Some(slot) = poses.get_mut(s) {
                *slot = *p;
            }
        }
        for (&id, q) in &self.landmarks {
            store.set_landmark(id, *q);
        }
    }

    pub fn validate(&self) -> Result<()> {
        for b in &self.residuals {
            if !self.poses.contains_key(&b.scan) {
                return Err(Error::InvalidInput(format!(
                    "residual references unknown scan {}",
                    b.scan
                )));
            }
            if !self.landmarks.contains_key(&b.track) {
                return Err(Error::InvalidInput(format!(
                    "residual references unknown landmark {}",
                    b.track
                )));
            }
        }
        if let Some(a) = self.anchor {
            if !self.poses.contains_key(&a) {
                return Err(Error::InvalidInput(format!("anchor {a} has no pose")));
            }
        }
        Ok(())
    }

    fn residual(&self, b: &ResidualBlock) -> Vector3<f64> {
        let pose = &self.poses[&b.scan];
        pose.rotation * self.landmarks[&b.track] + pose.translation - b.point
    }

    /// Stacked residual vector in block order.
    pub fn residual_vector(&self) -> DVector<f64> {
        let mut r = DVector::zeros(3 * self.residuals.len());
        for (k, b) in self.residuals.iter().enumerate() {
            r.fixed_rows_mut::<3>(3 * k).copy_from(&self.residual(b));
        }
        r
    }
}

/// Loss-weighted sum of squared residual norms.
pub fn energy(problem: &BaProblem) -> f64 {
    problem
        .residuals
        .iter()
        .map(|b| problem.loss.rho(problem.residual(b).norm_squared()))
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub update_tolerance: f64,
    pub initial_lambda: f64,
}

impl SolverConfig {
    pub fn local() -> Self {
        Self {
            max_iterations: 50,
            ..Self::global()
        }
    }

    pub fn global() -> Self {
        Self {
            max_iterations: 100,
            relative_tolerance: 1e-8,
            update_tolerance: 1e-10,
            initial_lambda: 1e-4,
        }
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::global()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Termination {
    NothingToOptimize,
    ZeroEnergy,
    RelativeDecrease,
    SmallUpdate,
    MaxIterations,
    /// Damping grew without finding a decrease.
    Stalled,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolveReport {
    pub initial_energy: f64,
    pub final_energy: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub max_update: f64,
    /// Energy after each accepted step.
    pub history: Vec<f64>,
}

impl SolveReport {
    fn trivial(e: f64, termination: Termination) -> Self {
        Self {
            initial_energy: e,
            final_energy: e,
            iterations: 0,
            termination,
            max_update: 0.0,
            history: Vec::new(),
        }
    }
}

/// Optimises only the poses in `free` (minus any fixed ones); landmarks stay put.
pub fn solve_local(problem: &mut BaProblem, free: &BTreeSet<usize>, config: &SolverConfig) -> Result<SolveReport> {
    problem.validate()?;
    let poses: Vec<usize> = free
        .iter()
        .copied()
        .filter(|s| problem.poses.contains_key(s) && !problem.fixed_poses.contains(s))
        .collect();
    solve(problem, &poses, &[], config)
}

/// Joint optimisation of all poses except the anchor and all landmarks.
pub fn solve_global(problem: &mut BaProblem, config: &SolverConfig) -> Result<SolveReport> {
    problem.validate()?;
    let anchor = problem
        .anchor
        .ok_or_else(|| Error::InvalidInput("global adjustment needs a gauge anchor".into()))?;
    let poses: Vec<usize> = problem
        .poses
        .keys()
        .copied()
        .filter(|s| *s != anchor && !problem.fixed_poses.contains(s))
        .collect();
    let landmarks: Vec<TrackId> = problem
        .landmarks
        .keys()
        .copied()
        .filter(|l| !problem.fixed_landmarks.contains(l))
        .collect();
    solve(problem, &poses, &landmarks, config)
}

const ENERGY_FLOOR: f64 = 1e-24;
const MAX_LAMBDA: f64 = 1e16;

type Matrix6 = SMatrix<f64, 6, 6>;

struct Normal {
    hpp: DMatrix<f64>,
    bp: DVector<f64>,
    hll: Vec<Matrix3<f64>>,
    bl: Vec<Vector3<f64>>,
    hpl: BTreeMap<(usize, usize), Matrix6x3<f64>>,
}

fn pose_jacobian(rq: &Vector3<f64>) -> SMatrix<f64, 3, 6> {
    let mut j = SMatrix::<f64, 3, 6>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(rq)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    j
}

fn build_normal(problem: &BaProblem, pose_idx: &BTreeMap<usize, usize>, lm_idx: &BTreeMap<TrackId, usize>) -> Normal {
    let np = pose_idx.len();
    let nl = lm_idx.len();
    let mut n = Normal {
        hpp: DMatrix::zeros(6 * np, 6 * np),
        bp: DVector::zeros(6 * np),
        hll: vec![Matrix3::zeros(); nl],
        bl: vec![Vector3::zeros(); nl],
        hpl: BTreeMap::new(),
    };
    for b in &problem.residuals {
        let pi = pose_idx.get(&b.scan).copied();
        let li = lm_idx.get(&b.track).copied();
        if pi.is_none() && li.is_none() {
            continue;
        }
        let pose = &problem.poses[&b.scan];
        let q = problem.landmarks[&b.track];
        let rq = pose.rotation * q;
        let r = rq + pose.translation - b.point;
        let w = problem.loss.weight(r.norm_squared());
        let jp = pose_jacobian(&rq);
        if let Some(pi) = pi {
            let h: Matrix6 = jp.transpose() * jp * w;
            let mut blk = n.hpp.fixed_view_mut::<6, 6>(6 * pi, 6 * pi);
            blk += h;
            let mut g = n.bp.fixed_rows_mut::<6>(6 * pi);
            g -= jp.transpose() * r * w;
        }
        if let Some(li) = li {
            let jl = pose.rotation;
            n.hll[li] += jl.transpose() * jl * w;
            n.bl[li] -= jl.transpose() * r * w;
            if let Some(pi) = pi {
                *n.hpl.entry((li, pi)).or_insert_with(Matrix6x3::zeros) += jp.transpose() * jl * w;
            }
        }
    }
    n
}

fn damp(h: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        h
    } else {
        h + lambda * h.max(1e-6)
    }
}

/// Solves the damped system; `None` when the reduced matrix is not positive definite.
fn solve_step(n: &Normal, lambda: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
    let np = n.bp.len() / 6;
    let mut s = n.hpp.clone();
    for k in 0..s.nrows() {
        s[(k, k)] = damp(n.hpp[(k, k)], lambda);
    }
    let mut rhs = n.bp.clone();
    let mut c_inv = Vec::with_capacity(n.hll.len());
    for c in &n.hll {
        let mut c = *c;
        for k in 0..3 {
            c[(k, k)] = damp(c[(k, k)], lambda);
        }
        c_inv.push(c.try_inverse()?);
    }
    let mut by_landmark: Vec<Vec<(usize, &Matrix6x3<f64>)>> = vec![Vec::new(); n.hll.len()];
    for (&(li, pi), b) in &n.hpl {
        by_landmark[li].push((pi, b));
    }
    for (li, blocks) in by_landmark.iter().enumerate() {
        for &(a, ba) in blocks {
            let bc: Matrix6x3<f64> = ba * c_inv[li];
            let mut r = rhs.fixed_rows_mut::<6>(6 * a);
            r -= bc * n.bl[li];
            for &(b, bb) in blocks {
                let mut blk = s.fixed_view_mut::<6, 6>(6 * a, 6 * b);
                blk -= bc * bb.transpose();
            }
        }
    }
    let dp = if np > 0 {
        s.cholesky()?.solve(&rhs)
    } else {
        DVector::zeros(0)
    };
    let dl = by_landmark
        .iter()
        .enumerate()
        .map(|(li, blocks)| {
            let mut g = n.bl[li];
            for &(a, ba) in blocks {
                g -= ba.transpose() * dp.fixed_rows::<6>(6 * a);
            }
            c_inv[li] * g
        })
        .collect();
    Some((dp, dl))
}

fn retract(pose: &RigidTransform, d: &Vector6<f64>) -> RigidTransform {
    let omega = Vector3::new(d[0], d[1], d[2]);
    RigidTransform {
        rotation: nearest_rotation(&(so3_exp(&omega) * pose.rotation)),
        translation: pose.translation + Vector3::new(d[3], d[4], d[5]),
    }
}

fn apply_step(
    problem: &BaProblem,
    pose_ids: &[usize],
    lm_ids: &[TrackId],
    dp: &DVector<f64>,
    dl: &[Vector3<f64>],
) -> BaProblem {
    let mut next = problem.clone();
    for (k, s) in pose_ids.iter().enumerate() {
        let d: Vector6<f64> = dp.fixed_rows::<6>(6 * k).into_owned();
        let p = next.poses.get_mut(s).expect("free pose exists");
        *p = retract(p, &d);
    }
    for (k, l) in lm_ids.iter().enumerate() {
        *next.landmarks.get_mut(l).expect("free landmark exists") += dl[k];
    }
    next
}

fn solve(
    problem: &mut BaProblem,
    pose_ids: &[usize],
    lm_ids: &[TrackId],
    config: &SolverConfig,
) -> Result<SolveReport> {
    let e0 = energy(problem);
    if !e0.is_finite() {
        return Err(Error::SolverDiverged("initial energy is not finite".into()));
    }
    if pose_ids.is_empty() && lm_ids.is_empty() {
        return Ok(SolveReport::trivial(e0, Termination::NothingToOptimize));
    }
    if e0 <= ENERGY_FLOOR {
        return Ok(SolveReport::trivial(e0, Termination::ZeroEnergy));
    }
    let pose_idx: BTreeMap<usize, usize> = pose_ids.iter().enumerate().map(|(k, &s)| (s, k)).collect();
    let lm_idx: BTreeMap<TrackId, usize> = lm_ids.iter().enumerate().map(|(k, &l)| (l, k)).collect();

    let mut report = SolveReport::trivial(e0, Termination::MaxIterations);
    let mut e = e0;
    let mut lambda = config.initial_lambda;
    let mut normal = build_normal(problem, &pose_idx, &lm_idx);
    while report.iterations < config.max_iterations {
        report.iterations += 1;
        let Some((dp, dl)) = solve_step(&normal, lambda) else {
            lambda *= 10.0;
            if lambda > MAX_LAMBDA {
                report.termination = Termination::Stalled;
                break;
            }
            continue;
        };
        let max_update = dp.amax().max(dl.iter().map(|v| v.amax()).fold(0.0, f64::max));
        report.max_update = max_update;
        let trial = apply_step(problem, pose_ids, lm_ids, &dp, &dl);
        let e_trial = energy(&trial);
        if e_trial.is_finite() && e_trial < e {
            let rel = (e - e_trial) / e;
            *problem = trial;
            e = e_trial;
            report.history.push(e);
            log::trace!("ba iteration {} energy {e:.6e} lambda {lambda:.1e}", report.iterations);
            lambda = (lambda / 3.0).max(1e-12);
            if e <= ENERGY_FLOOR {
                report.termination = Termination::ZeroEnergy;
                break;
            }
            normal = build_normal(problem, &pose_idx, &lm_idx);
            let done = if rel < config.relative_tolerance {
                Some(Termination::RelativeDecrease)
            } else if max_update < config.update_tolerance {
                Some(Termination::SmallUpdate)
            } else {
                None
            };
            if let Some(reason) = done {
                // damped steps converge only linearly; finish with one
                // undamped Gauss-Newton step when it still helps
                if let Some((dp, dl)) = solve_step(&normal, 0.0) {
                    let trial = apply_step(problem, pose_ids, lm_ids, &dp, &dl);
                    let e_trial = energy(&trial);
                    // at this accuracy the energy change can be below rounding
                    if e_trial.is_finite() && e_trial <= e {
                        *problem = trial;
                        if e_trial < e {
                            report.history.push(e_trial);
                        }
                        e = e_trial;
                        report.max_update = dp.amax().max(dl.iter().map(|v| v.amax()).fold(0.0, f64::max));
                    }
                }
                report.termination = reason;
                break;
            }
        } else {
            if max_update < config.update_tolerance {
                report.termination = Termination::SmallUpdate;
                break;
            }
            lambda *= 10.0;
            if lambda > MAX_LAMBDA {
                report.termination = Termination::Stalled;
                break;
            }
        }
    }
    report.final_energy = e;
    Ok(report)
}

/// Outcome of [`gradient_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientCheck {
    /// Worst `|analytic − numeric| / max(1, |analytic|, |numeric|)` over
    /// all residual Jacobian entries.
    pub max_deviation: f64,
    /// `‖Jᵀ W r‖` at the current state.
    pub gradient_norm: f64,
}

/// Analytic residual Jacobian (all poses then all landmarks, in key order).
pub fn jacobian(problem: &BaProblem) -> DMatrix<f64> {
    let pose_col: BTreeMap<usize, usize> = problem.poses.keys().enumerate().map(|(k, &s)| (s, 6 * k)).collect();
    let offset = 6 * problem.poses.len();
    let lm_col: BTreeMap<TrackId, usize> = problem
        .landmarks
        .keys()
        .enumerate()
        .map(|(k, &l)| (l, offset + 3 * k))
        .collect();
    let mut j = DMatrix::zeros(3 * problem.residuals.len(), offset + 3 * problem.landmarks.len());
    for (k, b) in problem.residuals.iter().enumerate() {
        let pose = &problem.poses[&b.scan];
        let rq = pose.rotation * problem.landmarks[&b.track];
        j.fixed_view_mut::<3, 6>(3 * k, pose_col[&b.scan])
            .copy_from(&pose_jacobian(&rq));
        j.fixed_view_mut::<3, 3>(3 * k, lm_col[&b.track])
            .copy_from(&pose.rotation);
    }
    j
}

fn perturbed(problem: &BaProblem, col: usize, h: f64) -> BaProblem {
    let mut p = problem.clone();
    let np = p.poses.len();
    if col < 6 * np {
        let s = *p.poses.keys().nth(col / 6).expect("column in range");
        let mut d = Vector6::zeros();
        d[col % 6] = h;
        let pose = p.poses.get_mut(&s).expect("pose exists");
        *pose = RigidTransform {
            rotation: so3_exp(&Vector3::new(d[0], d[1], d[2])) * pose.rotation,
            translation: pose.translation + Vector3::new(d[3], d[4], d[5]),
        };
    } else {
        let c = col - 6 * np;
        let l = *p.landmarks.keys().nth(c / 3).expect("column in range");
        p.landmarks.get_mut(&l).expect("landmark exists")[c % 3] += h;
    }
    p
}

/// Compares [`jacobian`] with central differences of step `h`.
pub fn gradient_check(problem: &BaProblem, h: f64) -> GradientCheck {
    let j = jacobian(problem);
    let mut worst: f64 = 0.0;
    for col in 0..j.ncols() {
        let plus = perturbed(problem, col, h).residual_vector();
        let minus = perturbed(problem, col, -h).residual_vector();
        let numeric = (plus - minus) / (2.0 * h);
        for row in 0..j.nrows() {
            let a = j[(row, col)];
            let f = numeric[row];
            worst = worst.max((a - f).abs() / 1f64.max(a.abs()).max(f.abs()));
        }
    }
    let r = problem.residual_vector();
    let mut wr = r.clone();
    for (k, b) in problem.residuals.iter().enumerate() {
        let w = problem.loss.weight(problem.residual(b).norm_squared());
        for d in 0..3 {
            wr[3 * k + d] *= w;
        }
    }
    GradientCheck {
        max_deviation: worst,
        gradient_norm: (j.transpose() * wr).norm(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_distance;
    use crate::tracks::aggregate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal as Gauss};

    fn random_rotation_axis(rng: &mut impl Rng) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
    }

    fn random_pose(rng: &mut impl Rng) -> RigidTransform {
        RigidTransform::from_axis_angle(
            &random_rotation_axis(rng),
            rng.random_range(0.0..3.0),
            Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ),
        )
    }

    fn perturb(pose: &RigidTransform, rng: &mut impl Rng, angle: f64, shift: f64) -> RigidTransform {
        let d = RigidTransform::from_axis_angle(
            &random_rotation_axis(rng),
            angle,
            random_rotation_axis(rng).normalize() * shift,
        );
        RigidTransform {
            rotation: d.rotation * pose.rotation,
            translation: pose.translation + d.translation,
        }
    }

    /// Scans observing every landmark, noise-free.
    fn synthetic(scans: usize, landmarks: usize, seed: u64) -> BaProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = BaProblem {
            anchor: Some(0),
            ..Default::default()
        };
        for s in 0..scans {
            let pose = if s == 0 {
                RigidTransform::identity()
            } else {
                random_pose(&mut rng)
            };
            p.poses.insert(s, pose);
        }
        for l in 0..landmarks {
            let q = Vector3::new(
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
            );
            p.landmarks.insert(l, q);
            for s in 0..scans {
                p.residuals.push(ResidualBlock {
                    track: l,
                    scan: s,
                    point: p.poses[&s].apply(&q),
                });
            }
        }
        p
    }

    #[test]
    fn energy_examples() {
        let p = synthetic(3, 10, 1);
        assert!(energy(&p) < 1e-18);

        let mut one = BaProblem::default();
        one.poses.insert(0, RigidTransform::identity());
        one.landmarks.insert(0, Vector3::zeros());
        one.residuals.push(ResidualBlock {
            track: 0,
            scan: 0,
            point: Vector3::new(0.1, 0.0, 0.0),
        });
        assert!((energy(&one) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn energy_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = synthetic(4, 20, 2);
        for b in p.residuals.iter_mut() {
            b.point += Vector3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            );
        }
        let mut naive = 0.0;
        for b in &p.residuals {
            let pose = p.poses[&b.scan];
            let q = p.landmarks[&b.track];
            for d in 0..3 {
                let mut v = -b.point[d] + pose.translation[d];
                for c in 0..3 {
                    v += pose.rotation[(d, c)] * q[c];
                }
                naive += v * v;
            }
        }
        assert!((energy(&p) - naive).abs() < 1e-12);
    }

    #[test]
    fn local_recovers_perturbed_poses() {
        let truth = synthetic(4, 30, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut p = truth.clone();
        let free: BTreeSet<usize> = [1, 2, 3].into_iter().collect();
        for s in &free {
            let pose = p.poses[s];
            p.poses.insert(*s, perturb(&pose, &mut rng, 2f64.to_radians(), 0.05));
        }
        let report = solve_local(&mut p, &free, &SolverConfig::local()).unwrap();
        assert!(report.final_energy < report.initial_energy);
        for s in &free {
            assert!(rotation_distance(&p.poses[s], &truth.poses[s]) < 1e-6);
            assert!((p.poses[s].translation - truth.poses[s].translation).norm() < 1e-6);
            assert!(p.poses[s].is_valid(1e-9));
        }
    }

    #[test]
    fn optimal_problem_is_a_fixed_point() {
        let mut p = synthetic(3, 10, 4);
        let before = energy(&p);
        let free: BTreeSet<usize> = [1, 2].into_iter().collect();
        let r = solve_local(&mut p, &free, &SolverConfig::local()).unwrap();
        assert!(r.iterations <= 1);
        assert!((r.final_energy - before).abs() < 1e-12);

        let r = solve_local(&mut p, &BTreeSet::new(), &SolverConfig::local()).unwrap();
        assert_eq!(r.termination, Termination::NothingToOptimize);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn global_recovers_perturbed_problem() {
        let truth = synthetic(6, 40, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut p = truth.clone();
        for s in 1..6 {
            let pose = p.poses[&s];
            p.poses.insert(s, perturb(&pose, &mut rng, 3f64.to_radians(), 0.1));
        }
        for q in p.landmarks.values_mut() {
            *q += random_rotation_axis(&mut rng) * 0.05;
        }
        let anchor = p.poses[&0];
        let r = solve_global(&mut p, &SolverConfig::global()).unwrap();
        assert!(r.final_energy < 1e-9, "{r:?}");
        assert!(r.final_energy < r.initial_energy);
        assert_eq!(p.poses[&0], anchor);
        for pose in p.poses.values() {
            assert!(pose.is_valid(1e-9));
        }
        assert!(r.history.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn single_track_converges_to_closed_form_aggregate() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = BaProblem {
            anchor: Some(0),
            ..Default::default()
        };
        let (t0, t1) = (random_pose(&mut rng), random_pose(&mut rng));
        p.poses.insert(0, t0);
        p.poses.insert(1, t1);
        p.fixed_poses.insert(1);
        let a = Vector3::new(0.2, 0.1, 1.0);
        let b = t1.apply(&t0.apply_inverse(&a)) + Vector3::new(0.03, -0.02, 0.01);
        p.landmarks.insert(0, Vector3::zeros());
        p.residuals.push(ResidualBlock {
            track: 0,
            scan: 0,
            point: a,
        });
        p.residuals.push(ResidualBlock {
            track: 0,
            scan: 1,
            point: b,
        });
        let r = solve_global(&mut p, &SolverConfig::global()).unwrap();
        let closed = aggregate(&[(a, t0), (b, t1)]).unwrap().landmark;
        assert!((p.landmarks[&0] - closed).norm() < 1e-9, "{r:?}");
    }

    fn noisy(seed: u64) -> BaProblem {
        let mut p = synthetic(5, 25, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let g = Gauss::new(0.0, 0.01).unwrap();
        for b in p.residuals.iter_mut() {
            b.point += Vector3::new(g.sample(&mut rng), g.sample(&mut rng), g.sample(&mut rng));
        }
        for s in 1..5 {
            let pose = p.poses[&s];
            p.poses.insert(s, perturb(&pose, &mut rng, 0.03, 0.05));
        }
        p
    }

    #[test]
    fn gauge_invariance() {
        let p = noisy(7);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let g = random_pose(&mut rng);
        let mut moved = p.clone();
        for pose in moved.poses.values_mut() {
            // world change x' = G x  ⇒  T' = T ∘ G⁻¹
            *pose = crate::geometry::compose(pose, &g.inverse());
        }
        for q in moved.landmarks.values_mut() {
            *q = g.apply(q);
        }
        assert!((energy(&p) - energy(&moved)).abs() < 1e-9);
        let mut a = p.clone();
        let ra = solve_global(&mut a, &SolverConfig::global()).unwrap();
        let rb = solve_global(&mut moved, &SolverConfig::global()).unwrap();
        assert!(
            (ra.final_energy - rb.final_energy).abs() < 1e-9,
            "{} {}",
            ra.final_energy,
            rb.final_energy
        );
    }

    #[test]
    fn huber_downweights_outliers() {
        let mut p = synthetic(3, 15, 8);
        p.residuals[4].point += Vector3::new(2.0, 0.0, 0.0);
        p.loss = Loss::Huber(0.1);
        let mut sq = p.clone();
        sq.loss = Loss::Squared;
        assert!(energy(&p) < energy(&sq));
        let truth = p.poses.clone();
        solve_global(&mut p, &SolverConfig::global()).unwrap();
        solve_global(&mut sq, &SolverConfig::global()).unwrap();
        let err = |x: &BaProblem| {
            (1..3)
                .map(|s| rotation_distance(&x.poses[&s], &truth[&s]))
                .fold(0.0, f64::max)
        };
        assert!(err(&p) < err(&sq));
    }

    #[test]
    fn gradient_check_examples() {
        let p = noisy(9);
        let c = gradient_check(&p, 1e-6);
        assert!(c.max_deviation < 1e-5, "{c:?}");

        let zero = synthetic(3, 8, 10);
        assert!(gradient_check(&zero, 1e-6).gradient_norm < 1e-10);

        let mut shuffled = p.clone();
        shuffled.residuals.reverse();
        let d = gradient_check(&shuffled, 1e-6);
        assert!((d.max_deviation - c.max_deviation).abs() < 1e-12);
        assert!((d.gradient_norm - c.gradient_norm).abs() < 1e-9);
    }

    #[test]
    fn validation_errors() {
        let mut p = synthetic(2, 2, 11);
        p.residuals.push(ResidualBlock {
            track: 99,
            scan: 0,
            point: Vector3::zeros(),
        });
        assert!(solve_global(&mut p, &SolverConfig::global()).is_err());
        let mut q = synthetic(2, 2, 11);
        q.anchor = None;
        assert!(solve_global(&mut q, &SolverConfig::global()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn global_solve_never_increases_energy(seed in 0u64..10_000) {
                let mut p = noisy(seed);
                let r = solve_global(&mut p, &SolverConfig::global()).unwrap();
                prop_assert!(r.final_energy <= r.initial_energy + 1e-12);
                for pose in p.poses.values() {
                    prop_assert!(pose.is_valid(1e-9));
                }
            }
        }
    }
}
