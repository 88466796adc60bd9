use thiserror::Error;

/// Errors produced by the registration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate correspondences: {0}")]
    DegenerateCorrespondences(String),

    #[error("no consensus: best hypothesis has {inliers} inliers")]
    NoConsensus { inliers: usize },

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("bad matrix shape: {0}")]
    BadMatrixShape(String),

    #[error("descriptor dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("no candidate poses for scan {scan}")]
    NoCandidates { scan: usize },

    #[error("solver diverged: {0}")]
    SolverDiverged(String),

    #[error("no point within {radius} m of the patch center")]
    EmptyNeighborhood { radius: f64 },

    #[error("estimated and ground-truth poses share no scan")]
    NoCommonScans,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for errors caused by malformed or inconsistent input data, as
    /// opposed to I/O failures.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}

/// Wraps an I/O error with the path it concerns.
pub(crate) fn at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}
