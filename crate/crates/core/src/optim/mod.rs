//! Two-phase pose refinement against 2D keypoints and the RCM constraint.
//!
//! Each frame's state is the shaft pose `cT_s` plus the articulation `(α, θl, θr)`,
//! updated through a 9-vector `[ω, v, dα, dθl, dθr]` with the shaft moved by right
//! perturbation `cT_s · exp(ξ)`. Phase 1 alternates per-frame keypoint fitting with
//! robust re-estimation of the RCM; phase 2 freezes the RCM and refines each frame
//! independently against keypoints plus the squared shaft-to-RCM distance.

mod loss;
mod solver;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::EstimatorError;

pub use loss::{
    keypoint_loss, keypoint_loss_with, keypoint_residuals, rcm_loss, rcm_residual,
    retract_pose, Keypoint2D, FrameObservation, KeypointLossKind, LossValue, RcmLoss, Residuals,
    StateVector, STATE_DIM,
};
pub use solver::{
    mean_rcm_distance, optimize_phase1, optimize_phase2, project_articulation, FrameProblem,
    OptimizationReport,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("keypoint {label:?} projects from behind the camera")]
    KeypointBehindCamera { label: String },
    #[error("no detected keypoint matches a model keypoint")]
    NoMatchingKeypoints,
    #[error("frame {frame} has {got} keypoints, at least 4 are required")]
    TooFewKeypoints { frame: usize, got: usize },
    #[error("{frames} frames but {poses} initial poses")]
    LengthMismatch { frames: usize, poses: usize },
    #[error("need at least {needed} frames, got {got}")]
    InsufficientFrames { needed: usize, got: usize },
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// Objective weights. The silhouette and photometric weights are carried for
/// configuration compatibility and must be zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(rename = "lambda_kpt")]
    pub kpt: f64,
    #[serde(rename = "lambda_rcm")]
    pub rcm: f64,
    #[serde(rename = "lambda_silh", default)]
    pub silh: f64,
    #[serde(rename = "lambda_px", default)]
    pub px: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            kpt: 1.0,
            rcm: 10.0,
            silh: 0.0,
            px: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), OptimError> {
        let all = [self.kpt, self.rcm, self.silh, self.px];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(OptimError::InvalidConfig(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if !(self.kpt > 0.0) {
            return Err(OptimError::InvalidConfig("lambda_kpt must be positive".into()));
        }
        if self.silh != 0.0 || self.px != 0.0 {
            return Err(OptimError::InvalidConfig(
                "silhouette and photometric terms are not supported; set their weights to 0"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Step direction used by the per-frame solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Descent {
    /// Damped Gauss-Newton direction, initial step 1.
    #[default]
    GaussNewton,
    /// Negative gradient, initial step `1e-2`.
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub weights: LossWeights,
    /// Phase-1 epochs (M).
    pub epochs: usize,
    /// Per-frame descent iterations inside one phase-1 epoch.
    pub steps_per_epoch: usize,
    /// Phase-2 early-stop patience (K).
    pub patience: usize,
    /// Phase-2 iteration cap per frame.
    pub max_iterations: usize,
    /// Inlier threshold for robust RCM re-estimation, mm.
    pub rcm_threshold: f64,
    pub rcm_max_rounds: usize,
    pub keypoint_loss: KeypointLossKind,
    /// Refine `(α, θl, θr)` in phase 1; otherwise only the shaft pose moves.
    pub phase1_articulation: bool,
    /// Refine `(α, θl, θr)` in phase 2.
    pub phase2_articulation: bool,
    pub descent: Descent,
    /// Process frames on the rayon pool. Results do not depend on this flag.
    pub parallel: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            epochs: 5,
            steps_per_epoch: 20,
            patience: 10,
            max_iterations: 200,
            rcm_threshold: 3.0,
            rcm_max_rounds: 5,
            keypoint_loss: KeypointLossKind::Chamfer,
            phase1_articulation: false,
            phase2_articulation: true,
            descent: Descent::GaussNewton,
            parallel: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        self.weights.validate()?;
        if self.epochs == 0 {
            return Err(OptimError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(OptimError::InvalidConfig("patience must be at least 1".into()));
        }
        if !(self.rcm_threshold > 0.0) {
            return Err(OptimError::InvalidConfig("rcm_threshold must be positive".into()));
        }
        Ok(())
    }
}
