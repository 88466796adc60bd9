//! Incremental multiview point cloud registration.
//!
//! Scans are connected into a sparse scan graph of verified pairwise edges,
//! then registered one by one against aggregated 3D landmarks (tracks), with
//! local and global bundle adjustment keeping the model consistent. A
//! patch-voting refinement stage sharpens tracks built from quantized
//! detector-free matches.

pub mod ba;
pub mod cloud;
pub mod config;
pub mod descriptor;
pub mod engine;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod refine;
pub mod spatial;
pub mod synth;
pub mod tracks;

pub use cloud::PointCloud;
pub use config::PipelineConfig;
pub use engine::{run_incremental, RegistrationModel};
pub use error::{Error, Result};
pub use geometry::{CorrespondenceSet, Point3, RansacConfig, RigidTransform};
pub use graph::{KeypointSet, MatchSet, ScanGraph};
pub use tracks::{Observation, Track, TrackStore};
