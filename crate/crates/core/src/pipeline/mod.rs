//! End-to-end calibration: initialization, two-phase refinement, outlier exclusion
//! and rigid alignment of end-effector positions, plus tool-tip evaluation.

mod format;
mod metrics;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::PinholeCamera;
use crate::estimators::{
    alignment_rmsd, estimate_rcm_robust, kabsch_umeyama, solve_epnp, Correspondence2D3D,
    EstimatorError, RcmEstimate,
};
use crate::geom::RigidTransform;
use crate::kinematics::{
    end_effector_pose, keypoints_3d, shaft_line, InstrumentModel, InstrumentPose,
};
use crate::optim::{
    keypoint_loss_with, optimize_phase1, optimize_phase2, FrameObservation, KeypointLossKind,
    OptimConfig, OptimError, OptimizationReport,
};
use crate::simdata::SimError;
use crate::stats::percentile;

pub use format::{
    FrameTruth, Sequence, SequenceFrame, SequenceHeader, SequenceTruth, Units,
    SYNTHETIC_FRAME_RATE,
};
pub use metrics::{evaluate, format_sig9, FrameMetrics, MetricsReport, Summary};

const MIN_FRAMES: usize = 3;
const MIN_KEYPOINTS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("only {got} frames survive initialization and outlier exclusion, at least 3 are required")]
    TooFewInliers { got: usize },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Simulation(#[from] SimError),
}

impl PipelineError {
    /// Stable machine-readable name of the error kind.
    pub fn class(&self) -> &'static str {
        match self {
            PipelineError::InvalidInput(_) => "invalid_input",
            PipelineError::TooFewInliers { .. } => "too_few_inliers",
            PipelineError::Estimator(e) => match e {
                EstimatorError::NoConsensus { .. } => "no_consensus",
                EstimatorError::NearParallelBundle { .. } => "near_parallel_bundle",
                _ => "estimator_failure",
            },
            PipelineError::Optim(_) => "optimization_failure",
            PipelineError::Simulation(SimError::FrustumViolation { .. }) => "frustum_violation",
            PipelineError::Simulation(SimError::InvalidConfig(_)) => "invalid_config",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub optim: OptimConfig,
    /// Keypoint-RMS outlier fence `Q3 + iqr_factor · IQR`.
    pub iqr_factor: f64,
    /// Lower bound on the keypoint-RMS fence, px.
    pub min_fence_px: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            iqr_factor: 1.5,
            min_fence_px: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDiagnostics {
    /// Frames without enough keypoints or without a valid initial pose.
    pub skipped_frames: Vec<usize>,
    pub initial_rcm: RcmEstimate,
    pub phase1_rcm: RcmEstimate,
    pub phase1: OptimizationReport,
    pub phase2: OptimizationReport,
    /// Mean shaft-line-to-RCM perpendicular distance after each phase, mm.
    pub mean_rcm_distance_phase1: f64,
    pub mean_rcm_distance_phase2: f64,
    /// Final keypoint RMS per frame, px (`None` for skipped frames).
    pub keypoint_rms: Vec<Option<f64>>,
    pub keypoint_rms_fence: f64,
    /// Mean rotation angle between `cT_rb · rbT_ee` and the refined `cT_ee` over inliers.
    pub mean_rotation_disagreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub schema_version: u32,
    #[serde(rename = "cT_rb")]
    pub cam_from_base: RigidTransform,
    #[serde(rename = "refined_cT_ee")]
    pub refined_cam_from_ee: Vec<Option<RigidTransform>>,
    pub refined_poses: Vec<Option<InstrumentPose>>,
    pub rcm_point: Vector3<f64>,
    /// Frames used in the final alignment.
    pub inliers: Vec<bool>,
    /// RMS residual of the alignment over the inlier frames, mm.
    pub alignment_rmsd: f64,
    pub frames_used: usize,
    pub diagnostics: CalibrationDiagnostics,
}

impl CalibrationResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, PipelineError> {
        let r: CalibrationResult =
            serde_json::from_str(s).map_err(|e| PipelineError::InvalidInput(e.to_string()))?;
        if r.schema_version != crate::SCHEMA_VERSION {
            return Err(PipelineError::InvalidInput(format!(
                "unsupported schema_version {}",
                r.schema_version
            )));
        }
        Ok(r)
    }
}

/// `cT̂_ee = cT̂_rb · rbT_ee`.
pub fn apply_calibration(result: &CalibrationResult, base_from_ee: &RigidTransform) -> RigidTransform {
    result.cam_from_base.compose(base_from_ee)
}

/// Shaft pose from the detections, with object points placed by the reported
/// articulation.
fn initial_pose(
    frame: &SequenceFrame,
    model: &InstrumentModel,
    camera: &PinholeCamera,
) -> Option<InstrumentPose> {
    let j = &frame.joints;
    let local = InstrumentPose::new(RigidTransform::identity(), j.wrist_pitch, j.jaw_left, j.jaw_right);
    let object = keypoints_3d(&local, model);
    let corrs: Vec<Correspondence2D3D> = frame
        .keypoints_2d
        .iter()
        .filter_map(|k| {
            object
                .iter()
                .find(|(l, _)| *l == k.label)
                .map(|(_, p)| Correspondence2D3D::new(k.label.clone(), k.uv(), *p))
        })
        .collect();
    if corrs.len() < MIN_KEYPOINTS {
        return None;
    }
    let shaft = solve_epnp(&corrs, camera).ok()?;
    Some(InstrumentPose { shaft, ..local })
}

fn keypoint_rms(
    pose: &InstrumentPose,
    model: &InstrumentModel,
    obs: &FrameObservation,
    kind: KeypointLossKind,
) -> Result<f64, OptimError> {
    let loss = keypoint_loss_with(pose, model, obs, kind)?.value;
    // The Chamfer loss sums two mean-squared terms.
    Ok(match kind {
        KeypointLossKind::Chamfer => (loss / 2.0).sqrt(),
        KeypointLossKind::Labeled => loss.sqrt(),
    })
}

/// Recovers `cT_rb` from keypoint detections and reported kinematics.
pub fn calibrate(
    frames: &[SequenceFrame],
    model: &InstrumentModel,
    camera: &PinholeCamera,
    config: &CalibrationConfig,
) -> Result<CalibrationResult, PipelineError> {
    model
        .validate()
        .map_err(|e| PipelineError::InvalidInput(e.to_string()))?;
    camera
        .validate()
        .map_err(|e| PipelineError::InvalidInput(e.to_string()))?;
    config.optim.validate()?;
    if !(config.iqr_factor >= 0.0 && config.min_fence_px >= 0.0) {
        return Err(PipelineError::InvalidInput(
            "iqr_factor and min_fence_px must be non-negative".into(),
        ));
    }
    if frames.len() < MIN_FRAMES {
        return Err(PipelineError::TooFewInliers { got: frames.len() });
    }

    let mut used = Vec::new();
    let mut skipped = Vec::new();
    let mut init = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        match initial_pose(f, model, camera) {
            Some(p) => {
                used.push(i);
                init.push(p);
            }
            None => skipped.push(i),
        }
    }
    if used.len() < MIN_FRAMES {
        return Err(PipelineError::TooFewInliers { got: used.len() });
    }
    let observations: Vec<FrameObservation> = used
        .iter()
        .map(|&i| FrameObservation {
            keypoints: frames[i].keypoints_2d.clone(),
            camera: *camera,
        })
        .collect();

    let opt = &config.optim;
    let lines: Vec<_> = init.iter().map(shaft_line).collect();
    let initial_rcm = estimate_rcm_robust(&lines, opt.rcm_threshold, opt.rcm_max_rounds)?;
    let (poses1, phase1_rcm, phase1) = optimize_phase1(&observations, &init, model, opt)?;
    let (poses2, phase2) = optimize_phase2(&observations, &poses1, &phase1_rcm.point, model, opt)?;

    let rms = observations
        .iter()
        .zip(&poses2)
        .map(|(o, p)| keypoint_rms(p, model, o, opt.keypoint_loss))
        .collect::<Result<Vec<f64>, _>>()?;
    let q1 = percentile(&rms, 25.0);
    let q3 = percentile(&rms, 75.0);
    let fence = (q3 + config.iqr_factor * (q3 - q1)).max(config.min_fence_px);

    let mut inliers = vec![false; frames.len()];
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut refined_cam_from_ee = vec![None; frames.len()];
    let mut refined_poses = vec![None; frames.len()];
    let mut keypoint_rms_all = vec![None; frames.len()];
    let mut pairs = Vec::new();
    for (k, &i) in used.iter().enumerate() {
        let ee = end_effector_pose(&poses2[k], model);
        refined_cam_from_ee[i] = Some(ee);
        refined_poses[i] = Some(poses2[k]);
        keypoint_rms_all[i] = Some(rms[k]);
        let keep = rms[k] <= fence && phase2.rcm_distances[k] <= opt.rcm_threshold;
        if keep {
            inliers[i] = true;
            src.push(*frames[i].reported_base_from_ee.translation());
            dst.push(*ee.translation());
            pairs.push((frames[i].reported_base_from_ee, ee));
        }
    }
    if src.len() < MIN_FRAMES {
        return Err(PipelineError::TooFewInliers { got: src.len() });
    }
    let cam_from_base = kabsch_umeyama(&src, &dst, None)?;
    let rmsd = alignment_rmsd(&cam_from_base, &src, &dst);
    let rotation_disagreement: Vec<f64> = pairs
        .iter()
        .map(|(rb, ee)| cam_from_base.compose(rb).rotation_distance(ee))
        .collect();

    Ok(CalibrationResult {
        schema_version: crate::SCHEMA_VERSION,
        cam_from_base,
        refined_cam_from_ee,
        refined_poses,
        rcm_point: phase1_rcm.point,
        frames_used: src.len(),
        inliers,
        alignment_rmsd: rmsd,
        diagnostics: CalibrationDiagnostics {
            skipped_frames: skipped,
            initial_rcm,
            mean_rcm_distance_phase1: phase1.mean_rcm_distance,
            mean_rcm_distance_phase2: phase2.mean_rcm_distance,
            phase1_rcm,
            phase1,
            phase2,
            keypoint_rms: keypoint_rms_all,
            keypoint_rms_fence: fence,
            mean_rotation_disagreement: crate::stats::mean(&rotation_disagreement),
        },
    })
}

/// Calibrates on a loaded sequence using its header camera and model.
pub fn calibrate_sequence(
    sequence: &Sequence,
    config: &CalibrationConfig,
) -> Result<CalibrationResult, PipelineError> {
    calibrate(
        &sequence.frames,
        &sequence.header.model,
        &sequence.header.camera,
        config,
    )
}

/// Evaluates `hand_eye` on a loaded sequence using its header camera, rig and model.
pub fn evaluate_sequence(hand_eye: &RigidTransform, sequence: &Sequence) -> MetricsReport {
    evaluate(
        hand_eye,
        &sequence.frames,
        &sequence.header.model,
        &sequence.header.camera,
        sequence.header.rig.as_ref(),
    )
}
