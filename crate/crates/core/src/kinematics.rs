//! Forward kinematics of a wristed instrument pivoting about a remote center of motion.
//!
//! Frame conventions, shared by the simulator and the solver:
//!
//! * shaft frame `s`: x-axis along the shaft centerline, pointing away from the RCM;
//! * wrist frame `w = s · Tx(wrist_offset) · Ry(α)`: wrist pitch about the shaft y-axis;
//! * jaw frames `l`, `r = w · Rz(θ)`: both jaws rotate about the wrist z-axis, so
//!   `l`, `r` and the end-effector frame share an origin and a z-axis;
//! * end-effector frame `ee = w · Rz(β)`, `β = (θl + θr) / 2`, whose x-axis bisects the jaws.
//!
//! The arm places the shaft with `rcm · Rz(q1) · Ry(q2) · Tx(q3) · Rx(q4)`.

use std::collections::HashSet;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Line3, RigidTransform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("invalid instrument model: {0}")]
    InvalidModel(String),
    #[error("invalid joint state: {0}")]
    InvalidJoints(String),
}

/// Instrument articulation readings. Angles in rad, insertion in mm.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointState {
    #[serde(rename = "q1")]
    pub yaw: f64,
    #[serde(rename = "q2")]
    pub pitch: f64,
    #[serde(rename = "q3")]
    pub insertion: f64,
    #[serde(rename = "q4")]
    pub roll: f64,
    #[serde(rename = "alpha")]
    pub wrist_pitch: f64,
    #[serde(rename = "theta_l")]
    pub jaw_left: f64,
    #[serde(rename = "theta_r")]
    pub jaw_right: f64,
}

impl JointState {
    pub const DOF: usize = 7;

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.yaw,
            self.pitch,
            self.insertion,
            self.roll,
            self.wrist_pitch,
            self.jaw_left,
            self.jaw_right,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self {
            yaw: a[0],
            pitch: a[1],
            insertion: a[2],
            roll: a[3],
            wrist_pitch: a[4],
            jaw_left: a[5],
            jaw_right: a[6],
        }
    }

    /// Index of the joints that are revolute (every joint except insertion).
    pub fn is_revolute(index: usize) -> bool {
        index != 2
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return Err(KinematicsError::InvalidJoints("non-finite value".into()));
        }
        if self.jaw_left < self.jaw_right {
            return Err(KinematicsError::InvalidJoints(format!(
                "theta_l ({}) must be >= theta_r ({})",
                self.jaw_left, self.jaw_right
            )));
        }
        if self.insertion < 0.0 {
            return Err(KinematicsError::InvalidJoints(format!(
                "insertion must be >= 0, got {}",
                self.insertion
            )));
        }
        Ok(())
    }
}

/// Rigid part of the instrument a keypoint is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Part {
    #[serde(rename = "s")]
    Shaft,
    #[serde(rename = "w")]
    Wrist,
    #[serde(rename = "l")]
    JawLeft,
    #[serde(rename = "r")]
    JawRight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelKeypoint {
    pub part: Part,
    pub label: String,
    /// Position in the part frame, mm.
    #[serde(rename = "xyz_mm")]
    pub position: Vector3<f64>,
}

impl ModelKeypoint {
    pub fn new(part: Part, label: impl Into<String>, position: Vector3<f64>) -> Self {
        Self {
            part,
            label: label.into(),
            position,
        }
    }
}

/// Minimal two-link wrist model with named keypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentModel {
    /// Shaft-frame origin to wrist joint along the shaft axis.
    #[serde(rename = "wrist_offset_mm")]
    pub wrist_offset: f64,
    /// Wrist joint to jaw tip.
    #[serde(rename = "gripper_length_mm")]
    pub gripper_length: f64,
    pub keypoints: Vec<ModelKeypoint>,
}

pub const DEFAULT_WRIST_OFFSET_MM: f64 = 9.1;
pub const DEFAULT_GRIPPER_LENGTH_MM: f64 = 9.6;
pub const DEFAULT_SHAFT_KEYPOINT_SPACING_MM: f64 = 15.0;

impl Default for InstrumentModel {
    fn default() -> Self {
        Self::with_lengths(DEFAULT_WRIST_OFFSET_MM, DEFAULT_GRIPPER_LENGTH_MM)
    }
}

impl InstrumentModel {
    /// Default five-keypoint layout: two shaft points on the centerline, the wrist
    /// center and both jaw tips.
    pub fn with_lengths(wrist_offset: f64, gripper_length: f64) -> Self {
        let tip = Vector3::new(gripper_length, 0.0, 0.0);
        Self {
            wrist_offset,
            gripper_length,
            keypoints: vec![
                ModelKeypoint::new(
                    Part::Shaft,
                    "shaft_proximal",
                    Vector3::new(-DEFAULT_SHAFT_KEYPOINT_SPACING_MM, 0.0, 0.0),
                ),
                ModelKeypoint::new(Part::Shaft, "shaft_distal", Vector3::zeros()),
                ModelKeypoint::new(Part::Wrist, "wrist", Vector3::zeros()),
                ModelKeypoint::new(Part::JawLeft, "tip_left", tip),
                ModelKeypoint::new(Part::JawRight, "tip_right", tip),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        if !(self.wrist_offset > 0.0) || !(self.gripper_length > 0.0) {
            return Err(KinematicsError::InvalidModel(
                "link lengths must be > 0".into(),
            ));
        }
        let mut seen = HashSet::new();
        for kp in &self.keypoints {
            if !seen.insert(kp.label.as_str()) {
                return Err(KinematicsError::InvalidModel(format!(
                    "duplicate keypoint label {:?}",
                    kp.label
                )));
            }
        }
        Ok(())
    }

    /// Tool tip in the end-effector frame: the jaw length along the bisector.
    pub fn tool_tip_in_ee(&self) -> Vector3<f64> {
        Vector3::new(self.gripper_length, 0.0, 0.0)
    }

    pub fn keypoint(&self, label: &str) -> Option<&ModelKeypoint> {
        self.keypoints.iter().find(|k| k.label == label)
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Articulation and global pose `{θl, θr, α, cT_s}` of the instrument.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstrumentPose {
    /// Camera-from-shaft transform.
    pub shaft: RigidTransform,
    pub wrist_pitch: f64,
    pub jaw_left: f64,
    pub jaw_right: f64,
}

impl InstrumentPose {
    pub fn new(shaft: RigidTransform, wrist_pitch: f64, jaw_left: f64, jaw_right: f64) -> Self {
        Self {
            shaft,
            wrist_pitch,
            jaw_left,
            jaw_right,
        }
    }

    /// Same articulation, expressed with the shaft frame as the reference.
    pub fn in_shaft_frame(&self) -> Self {
        Self {
            shaft: RigidTransform::identity(),
            ..*self
        }
    }

    pub fn jaw_bisector(&self) -> f64 {
        0.5 * (self.jaw_left + self.jaw_right)
    }
}

/// Camera-frame transforms of each rigid part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartTransforms {
    pub shaft: RigidTransform,
    pub wrist: RigidTransform,
    pub jaw_left: RigidTransform,
    pub jaw_right: RigidTransform,
}

impl PartTransforms {
    pub fn get(&self, part: Part) -> &RigidTransform {
        match part {
            Part::Shaft => &self.shaft,
            Part::Wrist => &self.wrist,
            Part::JawLeft => &self.jaw_left,
            Part::JawRight => &self.jaw_right,
        }
    }
}

/// `sT_w`: translation along the shaft axis followed by the wrist pitch.
pub fn wrist_from_shaft(model: &InstrumentModel, wrist_pitch: f64) -> RigidTransform {
    RigidTransform::from_translation(Vector3::new(model.wrist_offset, 0.0, 0.0))
        .compose(&RigidTransform::rot_y(wrist_pitch))
}

/// `wT_l` / `wT_r`: jaw rotation about the wrist z-axis.
pub fn jaw_from_wrist(jaw_angle: f64) -> RigidTransform {
    RigidTransform::rot_z(jaw_angle)
}

pub fn part_transforms(pose: &InstrumentPose, model: &InstrumentModel) -> PartTransforms {
    let wrist = pose
        .shaft
        .compose(&wrist_from_shaft(model, pose.wrist_pitch));
    PartTransforms {
        shaft: pose.shaft,
        wrist,
        jaw_left: wrist.compose(&jaw_from_wrist(pose.jaw_left)),
        jaw_right: wrist.compose(&jaw_from_wrist(pose.jaw_right)),
    }
}

/// `cT_ee = cT_s · sT_w · wT_l · lT_ee`, with `lT_ee = Rz(β - θl)`.
pub fn end_effector_pose(pose: &InstrumentPose, model: &InstrumentModel) -> RigidTransform {
    let parts = part_transforms(pose, model);
    parts
        .jaw_left
        .compose(&RigidTransform::rot_z(pose.jaw_bisector() - pose.jaw_left))
}

pub fn shaft_line(pose: &InstrumentPose) -> Line3 {
    let direction = pose.shaft.transform_vector(&Vector3::x());
    Line3::new(*pose.shaft.translation(), direction).expect("rotation preserves unit length")
}

/// Shaft placement for an arm whose shaft pivots about the origin of `rcm_frame`.
pub fn rcm_forward(joints: &JointState, rcm_frame: &RigidTransform) -> InstrumentPose {
    let shaft = rcm_frame
        .compose(&RigidTransform::rot_z(joints.yaw))
        .compose(&RigidTransform::rot_y(joints.pitch))
        .compose(&RigidTransform::from_translation(Vector3::new(
            joints.insertion,
            0.0,
            0.0,
        )))
        .compose(&RigidTransform::rot_x(joints.roll));
    InstrumentPose::new(
        shaft,
        joints.wrist_pitch,
        joints.jaw_left,
        joints.jaw_right,
    )
}

/// Model keypoints mapped into the pose's reference frame, in model order.
pub fn keypoints_3d<'m>(
    pose: &InstrumentPose,
    model: &'m InstrumentModel,
) -> Vec<(&'m str, Vector3<f64>)> {
    let parts = part_transforms(pose, model);
    model
        .keypoints
        .iter()
        .map(|kp| {
            (
                kp.label.as_str(),
                parts.get(kp.part).transform_point(&kp.position),
            )
        })
        .collect()
}

pub fn tool_tip(pose: &InstrumentPose, model: &InstrumentModel) -> Vector3<f64> {
    end_effector_pose(pose, model).transform_point(&model.tool_tip_in_ee())
}
