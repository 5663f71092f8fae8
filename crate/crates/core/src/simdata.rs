//! Synthetic sequences with known ground truth.
//!
//! An instrument pivots about a fixed RCM in front of a stereo camera. True joint
//! values follow a trajectory; the reported channel adds a constant bias and a
//! direction-dependent backlash offset, and the reported base-frame end-effector
//! pose is `inv(cT_rb) · B · cT_ee(reported joints)` with `B` a systematic offset.
//! Left-camera keypoint detections carry iid Gaussian pixel noise and random dropout.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{PinholeCamera, StereoRig};
use crate::geom::RigidTransform;
use crate::kinematics::{
    end_effector_pose, keypoints_3d, rcm_forward, tool_tip, InstrumentModel, InstrumentPose,
    JointState,
};
use crate::optim::{FrameObservation, Keypoint2D};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("frame {frame}: every keypoint falls outside the image")]
    FrustumViolation { frame: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Constant offset added to every reported joint (rad, insertion in mm).
    pub joint_bias: JointState,
    /// Hysteresis band per revolute joint, rad. The insertion entry must be zero.
    pub backlash_width: JointState,
    /// Standard deviation of keypoint detection noise, px.
    pub keypoint_noise_sigma: f64,
    /// Probability of dropping each keypoint in each frame.
    pub detection_dropout: f64,
    /// Systematic offset applied in the camera frame before expressing the reported
    /// end-effector pose in the base frame.
    pub base_offset: RigidTransform,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            joint_bias: JointState::default(),
            backlash_width: JointState::default(),
            keypoint_noise_sigma: 0.0,
            detection_dropout: 0.0,
            base_offset: RigidTransform::identity(),
        }
    }
}

impl NoiseModel {
    pub fn is_noiseless(&self) -> bool {
        *self == Self::default()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.into()));
        if self.joint_bias.to_array().iter().any(|b| !b.is_finite()) {
            return bad("joint_bias must be finite");
        }
        let widths = self.backlash_width.to_array();
        if widths.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("backlash_width entries must be finite and non-negative");
        }
        if widths
            .iter()
            .enumerate()
            .any(|(i, w)| !JointState::is_revolute(i) && *w != 0.0)
        {
            return bad("backlash is only modeled on revolute joints");
        }
        if !(self.keypoint_noise_sigma.is_finite() && self.keypoint_noise_sigma >= 0.0) {
            return bad("keypoint_noise_sigma must be non-negative");
        }
        if !(0.0..1.0).contains(&self.detection_dropout) {
            return bad("detection_dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Joint-space trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    /// Piecewise-linear path through the waypoints, sampled at evenly spaced
    /// path parameters (the first and last frames hit the end waypoints).
    Waypoints { waypoints: Vec<JointState> },
    /// Mean-reverting walk confined to `mean ± amplitude` per joint.
    RandomWalk {
        mean: JointState,
        amplitude: JointState,
        /// Fraction of the normalized offset pulled back toward the mean per frame.
        reversion: f64,
        /// Per-frame step standard deviation, in units of the amplitude.
        step_sigma: f64,
    },
}

impl Trajectory {
    fn validate(&self) -> Result<(), SimError> {
        match self {
            Trajectory::Waypoints { waypoints } if waypoints.is_empty() => Err(
                SimError::InvalidConfig("waypoint trajectory needs at least one waypoint".into()),
            ),
            Trajectory::Waypoints { .. } => Ok(()),
            Trajectory::RandomWalk {
                amplitude,
                reversion,
                step_sigma,
                ..
            } => {
                if amplitude.to_array().iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
                    return Err(SimError::InvalidConfig("amplitudes must be non-negative".into()));
                }
                if !(0.0..=1.0).contains(reversion) || !(*step_sigma >= 0.0) {
                    return Err(SimError::InvalidConfig(
                        "reversion must lie in [0, 1] and step_sigma be non-negative".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<JointState> {
        match self {
            Trajectory::Waypoints { waypoints } => (0..n)
                .map(|k| {
                    if waypoints.len() == 1 || n == 1 {
                        return waypoints[0];
                    }
                    let s = k as f64 * (waypoints.len() - 1) as f64 / (n - 1) as f64;
                    let i = (s.floor() as usize).min(waypoints.len() - 2);
                    let f = s - i as f64;
                    let (a, b) = (waypoints[i].to_array(), waypoints[i + 1].to_array());
                    JointState::from_array(std::array::from_fn(|j| a[j] + f * (b[j] - a[j])))
                })
                .collect(),
            Trajectory::RandomWalk {
                mean,
                amplitude,
                reversion,
                step_sigma,
            } => {
                let (mean, amp) = (mean.to_array(), amplitude.to_array());
                let mut z: [f64; 7] =
                    std::array::from_fn(|_| rng.random_range(-0.5..=0.5));
                (0..n)
                    .map(|k| {
                        if k > 0 {
                            for zj in z.iter_mut() {
                                let n: f64 = rng.sample(StandardNormal);
                                *zj = (*zj - reversion * *zj + step_sigma * n).clamp(-1.0, 1.0);
                            }
                        }
                        JointState::from_array(std::array::from_fn(|j| mean[j] + amp[j] * z[j]))
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub frame_count: usize,
    pub seed: u64,
    pub trajectory: Trajectory,
    /// Ground-truth camera-from-base transform `cT_rb`.
    pub gt_cam_from_base: RigidTransform,
    /// Camera-frame pose of the RCM; its origin is the pivot point.
    pub rcm_frame: RigidTransform,
    pub rig: StereoRig,
    pub model: InstrumentModel,
    #[serde(default)]
    pub noise: NoiseModel,
}

/// Rotation whose x-axis points from `from` toward `to`.
fn frame_toward(from: Vector3<f64>, to: Vector3<f64>) -> RigidTransform {
    let x = (to - from).normalize();
    let y = Vector3::y().cross(&x).normalize();
    let z = x.cross(&y);
    RigidTransform::from_matrix_parts(&Matrix3::from_columns(&[x, y, z]), from)
}

impl ScenarioConfig {
    /// Default scene with every noise source disabled.
    pub fn noiseless(frame_count: usize, seed: u64) -> Self {
        let camera = PinholeCamera::new(900.0, 900.0, 320.0, 256.0, 640, 512);
        Self {
            schema_version: crate::SCHEMA_VERSION,
            frame_count,
            seed,
            trajectory: Trajectory::RandomWalk {
                mean: JointState {
                    yaw: 0.0,
                    pitch: 0.0,
                    insertion: 95.0,
                    roll: 0.0,
                    wrist_pitch: 0.3,
                    jaw_left: 0.3,
                    jaw_right: -0.3,
                },
                amplitude: JointState {
                    yaw: 0.11,
                    pitch: 0.11,
                    insertion: 15.0,
                    roll: 0.6,
                    wrist_pitch: 0.4,
                    jaw_left: 0.2,
                    jaw_right: 0.2,
                },
                reversion: 0.1,
                step_sigma: 0.3,
            },
            gt_cam_from_base: RigidTransform::new(
                UnitQuaternion::from_euler_angles(0.4, -0.6, 1.1),
                Vector3::new(120.0, -80.0, 260.0),
            ),
            rcm_frame: frame_toward(Vector3::new(-35.0, -25.0, 0.0), Vector3::new(8.0, 7.0, 105.0)),
            rig: StereoRig {
                left: camera,
                right: camera,
                right_from_left: RigidTransform::from_translation(Vector3::new(-5.0, 0.0, 0.0)),
            },
            model: InstrumentModel::default(),
            noise: NoiseModel::default(),
        }
    }

    /// Biased proprioception: 0.01 rad bias per revolute joint, 0.02 rad backlash,
    /// 1 px detection noise and a fixed base offset.
    pub fn biased(frame_count: usize, seed: u64) -> Self {
        let mut cfg = Self::noiseless(frame_count, seed);
        let revolute = |v: f64| {
            JointState::from_array(std::array::from_fn(|i| {
                if JointState::is_revolute(i) {
                    v
                } else {
                    0.0
                }
            }))
        };
        cfg.noise = NoiseModel {
            joint_bias: revolute(0.01),
            backlash_width: revolute(0.02),
            keypoint_noise_sigma: 1.0,
            detection_dropout: 0.0,
            base_offset: RigidTransform::new(
                UnitQuaternion::from_scaled_axis(Vector3::new(0.02, -0.025, 0.015)),
                Vector3::new(8.0, -6.0, 6.0),
            ),
        };
        cfg
    }

    pub fn rcm_point(&self) -> Vector3<f64> {
        *self.rcm_frame.translation()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.frame_count < 3 {
            return Err(SimError::InvalidConfig(format!(
                "frame_count must be at least 3, got {}",
                self.frame_count
            )));
        }
        self.rig
            .validate()
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        self.model
            .validate()
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        self.noise.validate()?;
        self.trajectory.validate()
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFrame {
    pub true_joints: JointState,
    pub true_pose: InstrumentPose,
    pub true_cam_from_ee: RigidTransform,
    /// Left-camera detections after noise and dropout.
    pub observation: FrameObservation,
    /// Noise added to each retained detection (`u`, `v` hold the offsets).
    pub keypoint_noise: Vec<Keypoint2D>,
    pub reported_joints: JointState,
    pub reported_base_from_ee: RigidTransform,
    /// Tool tip in the left camera frame, mm.
    pub true_tip: Vector3<f64>,
    pub tip_left_px: Vector2<f64>,
    pub tip_right_px: Vector2<f64>,
}

/// Direction of motion per joint, `±1`, holding the previous direction when still.
fn motion_directions(joints: &[JointState]) -> Vec<[f64; 7]> {
    let mut dirs = Vec::with_capacity(joints.len());
    let mut current = [1.0; 7];
    if joints.len() > 1 {
        let (a, b) = (joints[0].to_array(), joints[1].to_array());
        for j in 0..7 {
            if b[j] < a[j] {
                current[j] = -1.0;
            }
        }
    }
    for (k, q) in joints.iter().enumerate() {
        if k > 0 {
            let (a, b) = (joints[k - 1].to_array(), q.to_array());
            for j in 0..7 {
                if b[j] > a[j] {
                    current[j] = 1.0;
                } else if b[j] < a[j] {
                    current[j] = -1.0;
                }
            }
        }
        dirs.push(current);
    }
    dirs
}

/// Joint readings under constant bias and backlash: `q + bias + dir · width / 2`.
pub fn reported_joints(true_joints: &[JointState], noise: &NoiseModel) -> Vec<JointState> {
    let bias = noise.joint_bias.to_array();
    let width = noise.backlash_width.to_array();
    true_joints
        .iter()
        .zip(motion_directions(true_joints))
        .map(|(q, dir)| {
            let q = q.to_array();
            JointState::from_array(std::array::from_fn(|j| {
                q[j] + bias[j] + 0.5 * width[j] * dir[j]
            }))
        })
        .collect()
}

pub fn generate_sequence(cfg: &ScenarioConfig) -> Result<Vec<SyntheticFrame>, SimError> {
    cfg.validate()?;
    let mut traj_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);

    let truth = cfg.trajectory.sample(cfg.frame_count, &mut traj_rng);
    let reported = reported_joints(&truth, &cfg.noise);
    let cam = &cfg.rig.left;
    let base_from_cam = cfg.gt_cam_from_base.inverse();
    let sigma = cfg.noise.keypoint_noise_sigma;

    let mut frames = Vec::with_capacity(cfg.frame_count);
    for (k, (q, q_rep)) in truth.iter().zip(&reported).enumerate() {
        let pose = rcm_forward(q, &cfg.rcm_frame);
        let mut detections = Vec::new();
        let mut noise = Vec::new();
        let mut visible = 0;
        for (label, p) in keypoints_3d(&pose, &cfg.model) {
            let dn = Vector2::new(
                sigma * noise_rng.sample::<f64, _>(StandardNormal),
                sigma * noise_rng.sample::<f64, _>(StandardNormal),
            );
            let dropped = noise_rng.random::<f64>() < cfg.noise.detection_dropout;
            let Ok(uv) = cam.project(&p) else { continue };
            if !cam.contains(&uv) {
                continue;
            }
            visible += 1;
            if !dropped {
                detections.push(Keypoint2D::new(label, uv + dn));
                noise.push(Keypoint2D::new(label, dn));
            }
        }
        if visible == 0 {
            return Err(SimError::FrustumViolation { frame: k });
        }
        let true_tip = tool_tip(&pose, &cfg.model);
        let reported_ee = end_effector_pose(&rcm_forward(q_rep, &cfg.rcm_frame), &cfg.model);
        frames.push(SyntheticFrame {
            true_joints: *q,
            true_pose: pose,
            true_cam_from_ee: end_effector_pose(&pose, &cfg.model),
            observation: FrameObservation {
                keypoints: detections,
                camera: *cam,
            },
            keypoint_noise: noise,
            reported_joints: *q_rep,
            reported_base_from_ee: base_from_cam
                .compose(&cfg.noise.base_offset)
                .compose(&reported_ee),
            true_tip,
            tip_left_px: project_unchecked(cam, &true_tip),
            tip_right_px: project_unchecked(
                &cfg.rig.right,
                &cfg.rig.right_from_left.transform_point(&true_tip),
            ),
        });
    }
    Ok(frames)
}

fn project_unchecked(cam: &PinholeCamera, p: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy)
}

/// Hidden truths used only for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub cam_from_base: RigidTransform,
    /// `B⁻¹ · cT_rb`: the transform that maps reported base-frame poses onto the
    /// camera frame. Equals `cam_from_base` when the base offset is the identity.
    pub effective_cam_from_base: RigidTransform,
    pub rcm_point: Vector3<f64>,
    pub tips: Vec<Vector3<f64>>,
}

pub fn ground_truth_bundle(cfg: &ScenarioConfig, frames: &[SyntheticFrame]) -> GroundTruth {
    GroundTruth {
        cam_from_base: cfg.gt_cam_from_base,
        effective_cam_from_base: cfg.noise.base_offset.inverse().compose(&cfg.gt_cam_from_base),
        rcm_point: cfg.rcm_point(),
        tips: frames.iter().map(|f| f.true_tip).collect(),
    }
}
