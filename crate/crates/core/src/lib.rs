//! Markerless hand-eye calibration for instruments constrained to pivot about a
//! remote center of motion (RCM).
//!
//! The pipeline initializes each frame's instrument pose from 2D keypoints and the
//! reported joint angles (EPnP), estimates the RCM from the shaft centerlines,
//! refines the poses in two phases (free, then RCM-constrained), and recovers the
//! camera-from-base transform by rigid alignment of end-effector positions.
//! [`simdata`] generates synthetic sequences with known ground truth.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod estimators;
pub mod geom;
pub mod kinematics;
pub mod optim;
pub mod pipeline;
pub mod simdata;
pub mod stats;

pub use camera::{PinholeCamera, StereoRig};
pub use estimators::{Correspondence2D3D, RcmEstimate};
pub use geom::{Line3, RigidTransform, Twist};
pub use kinematics::{InstrumentModel, InstrumentPose, JointState, Part};
pub use optim::{FrameObservation, Keypoint2D, LossWeights, OptimConfig, OptimizationReport};
pub use pipeline::{
    apply_calibration, calibrate, evaluate, CalibrationConfig, CalibrationResult, MetricsReport,
    PipelineError, Sequence,
};
pub use simdata::{generate_sequence, ground_truth_bundle, NoiseModel, ScenarioConfig, SyntheticFrame};

/// Version tag written into every JSON document this crate produces.
pub const SCHEMA_VERSION: u32 = 1;
