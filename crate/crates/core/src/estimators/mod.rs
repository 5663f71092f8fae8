//! Closed-form and robust estimators used by the calibration pipeline.

mod epnp;
mod kabsch;
mod rcm;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use epnp::{reprojection_rms, solve_epnp};
pub use kabsch::{alignment_rmsd, kabsch_umeyama};
pub use rcm::{estimate_rcm, estimate_rcm_robust, rcm_residual_sum, RcmEstimate};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("object points are collinear")]
    CollinearPoints,
    #[error("every pose candidate places points behind the camera")]
    AllCandidatesBehindCamera,
    #[error("need at least {needed} lines, got {got}")]
    InsufficientLines { needed: usize, got: usize },
    #[error("line bundle is near-parallel (normal matrix condition number {condition:.3e})")]
    NearParallelBundle { condition: f64 },
    #[error("robust RCM estimation lost consensus ({inliers} inliers left)")]
    NoConsensus { inliers: usize },
    #[error("point sets have mismatched lengths ({src} vs {dst})")]
    LengthMismatch { src: usize, dst: usize },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("degenerate configuration: source points are collinear")]
    DegenerateConfiguration,
    #[error("duplicate correspondence label {0:?}")]
    DuplicateLabel(String),
}

/// A labeled 2D-3D match: image point in px, object point in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correspondence2D3D {
    pub label: String,
    pub image: Vector2<f64>,
    pub object: Vector3<f64>,
}

impl Correspondence2D3D {
    pub fn new(label: impl Into<String>, image: Vector2<f64>, object: Vector3<f64>) -> Self {
        Self {
            label: label.into(),
            image,
            object,
        }
    }
}
