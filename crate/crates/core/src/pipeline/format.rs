//! Frame-sequence JSON document.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "header": { "units": {...}, "camera": {...}, "rig": {...}, "model": {...},
//!               "nominal_cT_rb": {"quat": [w, x, y, z], "trans": [x, y, z]} },
//!   "gt": { "cT_rb": {...}, "effective_cT_rb": {...}, "rcm_point": [x, y, z] },
//!   "frames": [ { "t": 0.0,
//!                 "keypoints_2d": [{"label": "wrist", "u": 311.2, "v": 240.9}],
//!                 "joints": {"q1": 0.0, "q2": 0.0, "q3": 95.0, "q4": 0.0,
//!                            "alpha": 0.3, "theta_l": 0.3, "theta_r": -0.3},
//!                 "reported_rbT_ee": {...},
//!                 "gt": {"tip_3d": [...], "tip_2d_left": [...], "tip_2d_right": [...],
//!                        "cT_ee": {...}} } ]
//! }
//! ```
//!
//! `rig`, both `gt` blocks and every field inside a frame `gt` block are optional.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::camera::{PinholeCamera, StereoRig};
use crate::geom::RigidTransform;
use crate::kinematics::{InstrumentModel, JointState};
use crate::optim::Keypoint2D;
use crate::simdata::{ground_truth_bundle, ScenarioConfig, SyntheticFrame};

/// Frame rate used to stamp synthetic frames, Hz.
pub const SYNTHETIC_FRAME_RATE: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub length: String,
    pub angle: String,
    pub image: String,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            length: "mm".into(),
            angle: "rad".into(),
            image: "px".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceHeader {
    #[serde(default)]
    pub units: Units,
    /// Camera that observed `keypoints_2d`; the left camera of `rig` when present.
    pub camera: PinholeCamera,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rig: Option<StereoRig>,
    pub model: InstrumentModel,
    /// Hand-eye transform assumed before calibration.
    #[serde(rename = "nominal_cT_rb", default)]
    pub nominal_cam_from_base: RigidTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceTruth {
    #[serde(rename = "cT_rb")]
    pub cam_from_base: RigidTransform,
    #[serde(rename = "effective_cT_rb", default, skip_serializing_if = "Option::is_none")]
    pub effective_cam_from_base: Option<RigidTransform>,
    pub rcm_point: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FrameTruth {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tip_3d: Option<Vector3<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tip_2d_left: Option<Vector2<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tip_2d_right: Option<Vector2<f64>>,
    #[serde(rename = "cT_ee", default, skip_serializing_if = "Option::is_none")]
    pub cam_from_ee: Option<RigidTransform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceFrame {
    pub t: f64,
    pub keypoints_2d: Vec<Keypoint2D>,
    pub joints: JointState,
    #[serde(rename = "reported_rbT_ee")]
    pub reported_base_from_ee: RigidTransform,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<FrameTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub schema_version: u32,
    pub header: SequenceHeader,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<SequenceTruth>,
    pub frames: Vec<SequenceFrame>,
}

impl Sequence {
    pub fn from_json(s: &str) -> Result<Self, PipelineError> {
        let seq: Sequence =
            serde_json::from_str(s).map_err(|e| PipelineError::InvalidInput(e.to_string()))?;
        seq.validate()?;
        Ok(seq)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sequence serialization cannot fail")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let invalid = |m: String| Err(PipelineError::InvalidInput(m));
        if self.schema_version != crate::SCHEMA_VERSION {
            return invalid(format!(
                "unsupported schema_version {} (expected {})",
                self.schema_version,
                crate::SCHEMA_VERSION
            ));
        }
        let units = &self.header.units;
        if units.length != "mm" || units.angle != "rad" || units.image != "px" {
            return invalid("units must be mm, rad and px".into());
        }
        if let Err(e) = self.header.camera.validate() {
            return invalid(e.to_string());
        }
        if let Some(Err(e)) = self.header.rig.as_ref().map(StereoRig::validate) {
            return invalid(e.to_string());
        }
        if let Err(e) = self.header.model.validate() {
            return invalid(e.to_string());
        }
        for (i, f) in self.frames.iter().enumerate() {
            if let Err(e) = f.joints.validate() {
                return invalid(format!("frame {i}: {e}"));
            }
            if f.keypoints_2d.iter().any(|k| !(k.u.is_finite() && k.v.is_finite())) {
                return invalid(format!("frame {i}: non-finite keypoint"));
            }
        }
        Ok(())
    }

    /// Packages a synthetic sequence. The nominal hand-eye is the configured ground
    /// truth; ground-truth blocks are included when `with_truth` is set.
    pub fn from_synthetic(cfg: &ScenarioConfig, frames: &[SyntheticFrame], with_truth: bool) -> Self {
        let bundle = ground_truth_bundle(cfg, frames);
        Sequence {
            schema_version: crate::SCHEMA_VERSION,
            header: SequenceHeader {
                units: Units::default(),
                camera: cfg.rig.left,
                rig: Some(cfg.rig),
                model: cfg.model.clone(),
                nominal_cam_from_base: cfg.gt_cam_from_base,
            },
            gt: with_truth.then_some(SequenceTruth {
                cam_from_base: bundle.cam_from_base,
                effective_cam_from_base: Some(bundle.effective_cam_from_base),
                rcm_point: bundle.rcm_point,
            }),
            frames: frames
                .iter()
                .enumerate()
                .map(|(k, f)| SequenceFrame {
                    t: k as f64 / SYNTHETIC_FRAME_RATE,
                    keypoints_2d: f.observation.keypoints.clone(),
                    joints: f.reported_joints,
                    reported_base_from_ee: f.reported_base_from_ee,
                    gt: with_truth.then_some(FrameTruth {
                        tip_3d: Some(f.true_tip),
                        tip_2d_left: Some(f.tip_left_px),
                        tip_2d_right: Some(f.tip_right_px),
                        cam_from_ee: Some(f.true_cam_from_ee),
                    }),
                })
                .collect(),
        }
    }
}
