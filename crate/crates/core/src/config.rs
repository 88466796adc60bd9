//! Pipeline configuration as a TOML file.
//!
//! Every key is optional; missing keys take the library defaults.
//!
//! ```toml
//! seed = 7
//!
//! [graph]
//! top_k = 10
//! min_inliers = 30
//! min_ratio = 0.3
//!
//! [engine]
//! min_initial_matches = 100
//! min_visible_tracks = 30
//! cluster_rotation_deg = 5.0
//! cluster_translation = 0.2
//!
//! [ba]
//! global_every = 5
//! global_growth = 0.25
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ba::{Loss, SolverConfig};
use crate::engine::EngineConfig;
use crate::error::{at, Error, Result};
use crate::eval::{EvalConfig, DEFAULT_ROTATION_THRESHOLDS_DEG, DEFAULT_TRANSLATION_THRESHOLDS};
use crate::geometry::RansacConfig;
use crate::graph::{GraphConfig, KeypointConfig, MatchConfig, OverlapConfig, VerifyThresholds};
use crate::refine::RefineConfig;
use crate::tracks::TrackConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    pub graph: GraphSection,
    pub engine: EngineSection,
    pub tracks: TrackSection,
    pub ba: BaSection,
    pub refine: RefineSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    /// Overlap partners proposed per scan.
    pub top_k: usize,
    pub min_inliers: usize,
    pub min_ratio: f64,
    pub ransac_iterations: usize,
    pub inlier_threshold: f64,
    pub keypoint_voxel: f64,
    pub normal_radius: f64,
    pub descriptor_radius: f64,
    /// Lowe ratio test for descriptor matching; off when absent.
    pub ratio_test: Option<f64>,
    pub overlap_voxel: f64,
    pub overlap_radius: f64,
    pub overlap_hypotheses: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub min_initial_matches: usize,
    pub min_visible_tracks: usize,
    pub cluster_rotation_deg: f64,
    pub cluster_translation: f64,
    pub clustering: bool,
    pub ransac_iterations: usize,
    pub inlier_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackSection {
    pub admission_threshold: f64,
    pub filter_threshold: f64,
    pub min_length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaSection {
    pub local: bool,
    pub global: bool,
    pub global_every: usize,
    pub global_growth: f64,
    pub local_iterations: usize,
    pub global_iterations: usize,
    pub relative_tolerance: f64,
    pub update_tolerance: f64,
    pub initial_lambda: f64,
    /// Huber scale (m); squared loss when absent.
    pub huber: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub cell: f64,
    pub k: usize,
    pub radius: f64,
    pub score_neighbors: usize,
    pub spatial_neighbors: usize,
    pub repeat: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub recall_threshold: f64,
    pub rotation_thresholds_deg: Vec<f64>,
    pub translation_thresholds: Vec<f64>,
}

impl Default for GraphSection {
    fn default() -> Self {
        let g = GraphConfig::default();
        Self {
            top_k: g.top_k,
            min_inliers: g.verify.min_inliers,
            min_ratio: g.verify.min_ratio,
            ransac_iterations: g.ransac.iterations,
            inlier_threshold: g.ransac.inlier_threshold,
            keypoint_voxel: g.keypoints.voxel,
            normal_radius: g.keypoints.normal_radius,
            descriptor_radius: g.keypoints.descriptor_radius,
            ratio_test: g.matching.ratio,
            overlap_voxel: g.overlap.keypoints.voxel,
            overlap_radius: g.overlap.rho,
            overlap_hypotheses: g.overlap.hypotheses,
        }
    }
}

impl Default for EngineSection {
    fn default() -> Self {
        let e = EngineConfig::default();
        Self {
            min_initial_matches: e.min_initial_matches,
            min_visible_tracks: e.min_visible_tracks,
            cluster_rotation_deg: e.cluster_rotation.to_degrees(),
            cluster_translation: e.cluster_translation,
            clustering: e.clustering,
            ransac_iterations: e.ransac.iterations,
            inlier_threshold: e.ransac.inlier_threshold,
        }
    }
}

impl Default for TrackSection {
    fn default() -> Self {
        let t = TrackConfig::default();
        Self {
            admission_threshold: t.admission_threshold,
            filter_threshold: t.filter_threshold,
            min_length: t.min_length,
        }
    }
}

impl Default for BaSection {
    fn default() -> Self {
        let e = EngineConfig::default();
        Self {
            local: e.local_ba,
            global: e.global_ba,
            global_every: e.global_every,
            global_growth: e.global_growth,
            local_iterations: e.local_solver.max_iterations,
            global_iterations: e.global_solver.max_iterations,
            relative_tolerance: e.global_solver.relative_tolerance,
            update_tolerance: e.global_solver.update_tolerance,
            initial_lambda: e.global_solver.initial_lambda,
            huber: None,
        }
    }
}

impl Default for RefineSection {
    fn default() -> Self {
        let r = RefineConfig::default();
        Self {
            cell: 0.2,
            k: r.k,
            radius: r.radius,
            score_neighbors: r.score_neighbors,
            spatial_neighbors: r.spatial_neighbors,
            repeat: r.repeat,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            recall_threshold: EvalConfig::default().recall_threshold,
            rotation_thresholds_deg: DEFAULT_ROTATION_THRESHOLDS_DEG.to_vec(),
            translation_thresholds: DEFAULT_TRANSLATION_THRESHOLDS.to_vec(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "{name} must be a positive number, got {v}"
        )))
    }
}

fn nonzero(name: &str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} must be at least 1")))
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path).map_err(at(path))?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.graph;
        nonzero("graph.top_k", g.top_k)?;
        nonzero("graph.ransac_iterations", g.ransac_iterations)?;
        if !(0.0..=1.0).contains(&g.min_ratio) {
            return Err(Error::InvalidConfig("graph.min_ratio must lie in [0, 1]".into()));
        }
        positive("graph.inlier_threshold", g.inlier_threshold)?;
        positive("graph.keypoint_voxel", g.keypoint_voxel)?;
        positive("graph.normal_radius", g.normal_radius)?;
        positive("graph.descriptor_radius", g.descriptor_radius)?;
        if let Some(r) = g.ratio_test {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::InvalidConfig("graph.ratio_test must lie in (0, 1]".into()));
            }
        }
        positive("graph.overlap_voxel", g.overlap_voxel)?;
        positive("graph.overlap_radius", g.overlap_radius)?;
        nonzero("graph.overlap_hypotheses", g.overlap_hypotheses)?;

        let e = &self.engine;
        positive("engine.cluster_rotation_deg", e.cluster_rotation_deg)?;
        positive("engine.cluster_translation", e.cluster_translation)?;
        nonzero("engine.ransac_iterations", e.ransac_iterations)?;
        positive("engine.inlier_threshold", e.inlier_threshold)?;

        positive("tracks.admission_threshold", self.tracks.admission_threshold)?;
        positive("tracks.filter_threshold", self.tracks.filter_threshold)?;
        if self.tracks.min_length < 2 {
            return Err(Error::InvalidConfig("tracks.min_length must be at least 2".into()));
        }

        let b = &self.ba;
        nonzero("ba.global_every", b.global_every)?;
        if !(b.global_growth >= 0.0 && b.global_growth.is_finite()) {
            return Err(Error::InvalidConfig("ba.global_growth must be >= 0".into()));
        }
        positive("ba.relative_tolerance", b.relative_tolerance)?;
        positive("ba.update_tolerance", b.update_tolerance)?;
        positive("ba.initial_lambda", b.initial_lambda)?;
        if let Some(h) = b.huber {
            positive("ba.huber", h)?;
        }

        let r = &self.refine;
        positive("refine.cell", r.cell)?;
        nonzero("refine.k", r.k)?;
        positive("refine.radius", r.radius)?;
        nonzero("refine.score_neighbors", r.score_neighbors)?;
        nonzero("refine.repeat", r.repeat)?;

        positive("eval.recall_threshold", self.eval.recall_threshold)?;
        for t in self
            .eval
            .rotation_thresholds_deg
            .iter()
            .chain(&self.eval.translation_thresholds)
        {
            positive("eval thresholds", *t)?;
        }
        Ok(())
    }

    pub fn graph_config(&self) -> GraphConfig {
        let g = &self.graph;
        let defaults = GraphConfig::default();
        GraphConfig {
            top_k: g.top_k,
            verify: VerifyThresholds {
                min_inliers: g.min_inliers,
                min_ratio: g.min_ratio,
            },
            ransac: RansacConfig {
                iterations: g.ransac_iterations,
                inlier_threshold: g.inlier_threshold,
                seed: self.seed,
            },
            keypoints: KeypointConfig {
                voxel: g.keypoint_voxel,
                normal_radius: g.normal_radius,
                descriptor_radius: g.descriptor_radius,
            },
            matching: MatchConfig { ratio: g.ratio_test },
            overlap: OverlapConfig {
                keypoints: KeypointConfig {
                    voxel: g.overlap_voxel,
                    ..defaults.overlap.keypoints
                },
                rho: g.overlap_radius,
                hypotheses: g.overlap_hypotheses,
                ransac: RansacConfig {
                    seed: self.seed,
                    ..defaults.overlap.ransac
                },
            },
        }
    }

    fn solver(&self, max_iterations: usize) -> SolverConfig {
        SolverConfig {
            max_iterations,
            relative_tolerance: self.ba.relative_tolerance,
            update_tolerance: self.ba.update_tolerance,
            initial_lambda: self.ba.initial_lambda,
        }
    }

    fn loss(&self) -> Loss {
        self.ba.huber.map_or(Loss::Squared, Loss::Huber)
    }

    pub fn engine_config(&self) -> EngineConfig {
        let e = &self.engine;
        EngineConfig {
            min_initial_matches: e.min_initial_matches,
            min_visible_tracks: e.min_visible_tracks,
            cluster_rotation: e.cluster_rotation_deg.to_radians(),
            cluster_translation: e.cluster_translation,
            clustering: e.clustering,
            ransac: RansacConfig {
                iterations: e.ransac_iterations,
                inlier_threshold: e.inlier_threshold,
                seed: 0,
            },
            tracks: TrackConfig {
                admission_threshold: self.tracks.admission_threshold,
                filter_threshold: self.tracks.filter_threshold,
                min_length: self.tracks.min_length,
                seed: 0,
            },
            local_ba: self.ba.local,
            global_ba: self.ba.global,
            global_every: self.ba.global_every,
            global_growth: self.ba.global_growth,
            local_solver: self.solver(self.ba.local_iterations),
            global_solver: self.solver(self.ba.global_iterations),
            loss: self.loss(),
            seed: self.seed,
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        let r = &self.refine;
        RefineConfig {
            k: r.k,
            radius: r.radius,
            score_neighbors: r.score_neighbors,
            spatial_neighbors: r.spatial_neighbors,
            seed: self.seed,
            repeat: r.repeat,
            solver: self.solver(self.ba.global_iterations),
            loss: self.loss(),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            recall_threshold: self.eval.recall_threshold,
            rotation_thresholds_deg: self.eval.rotation_thresholds_deg.clone(),
            translation_thresholds: self.eval.translation_thresholds.clone(),
        }
    }
}
