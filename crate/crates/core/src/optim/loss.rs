use nalgebra::{Matrix2x3, Rotation3, SMatrix, SVector, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::OptimError;
use crate::camera::PinholeCamera;
use crate::geom::{skew, Twist};
use crate::kinematics::{InstrumentModel, InstrumentPose, Part};

pub const STATE_DIM: usize = 9;

/// Increment `[ω, v, dα, dθl, dθr]`.
pub type StateVector = SVector<f64, STATE_DIM>;

type Jacobian2 = SMatrix<f64, 2, STATE_DIM>;
type Jacobian3 = SMatrix<f64, 3, STATE_DIM>;

/// A detected keypoint in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint2D {
    pub label: String,
    pub u: f64,
    pub v: f64,
}

impl Keypoint2D {
    pub fn new(label: impl Into<String>, uv: Vector2<f64>) -> Self {
        Self {
            label: label.into(),
            u: uv.x,
            v: uv.y,
        }
    }

    pub fn uv(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservation {
    pub keypoints: Vec<Keypoint2D>,
    pub camera: PinholeCamera,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeypointLossKind {
    /// Symmetric nearest-neighbour loss, labels ignored when matching.
    #[default]
    Chamfer,
    /// Mean squared distance between equally labeled keypoints.
    Labeled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradient: StateVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RcmLoss {
    pub value: f64,
    /// Gradient with respect to each pose's shaft twist `[ω, v]`.
    pub gradients: Vec<Vector6<f64>>,
}

/// Stacked residuals `r` and their Jacobian rows; the loss is `Σ r²`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Residuals {
    pub values: Vec<f64>,
    pub rows: Vec<StateVector>,
}

impl Residuals {
    pub fn cost(&self) -> f64 {
        self.values.iter().map(|r| r * r).sum()
    }

    pub fn gradient(&self) -> StateVector {
        self.values
            .iter()
            .zip(&self.rows)
            .map(|(r, row)| row * (2.0 * r))
            .sum()
    }

    /// `(JᵀJ, Jᵀr)`.
    pub fn normal_equations(&self) -> (SMatrix<f64, STATE_DIM, STATE_DIM>, StateVector) {
        let mut jtj = SMatrix::<f64, STATE_DIM, STATE_DIM>::zeros();
        let mut jtr = StateVector::zeros();
        for (r, row) in self.values.iter().zip(&self.rows) {
            jtj += row * row.transpose();
            jtr += row * *r;
        }
        (jtj, jtr)
    }

    pub fn push_scaled2(&mut self, r: Vector2<f64>, j: &Jacobian2, scale: f64) {
        for k in 0..2 {
            self.values.push(scale * r[k]);
            self.rows.push(j.row(k).transpose() * scale);
        }
    }

    pub fn push_scaled3(&mut self, r: Vector3<f64>, j: &Jacobian3, scale: f64) {
        for k in 0..3 {
            self.values.push(scale * r[k]);
            self.rows.push(j.row(k).transpose() * scale);
        }
    }

    pub fn extend(&mut self, other: Residuals) {
        self.values.extend(other.values);
        self.rows.extend(other.rows);
    }
}

pub fn retract_pose(pose: &InstrumentPose, delta: &StateVector) -> InstrumentPose {
    let twist = Twist::from_slice(&delta.as_slice()[..6]);
    InstrumentPose {
        shaft: pose.shaft.retract(&twist),
        wrist_pitch: pose.wrist_pitch + delta[6],
        jaw_left: pose.jaw_left + delta[7],
        jaw_right: pose.jaw_right + delta[8],
    }
}

struct Projected<'m> {
    label: &'m str,
    uv: Vector2<f64>,
    jacobian: Jacobian2,
}

/// Shaft-frame keypoint position and its derivatives with respect to `(α, θl, θr)`.
fn shaft_frame_point(
    part: Part,
    local: &Vector3<f64>,
    pose: &InstrumentPose,
    model: &InstrumentModel,
) -> (Vector3<f64>, [Vector3<f64>; 3]) {
    let zero = Vector3::zeros();
    let offset = Vector3::new(model.wrist_offset, 0.0, 0.0);
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), pose.wrist_pitch);
    let jaw = |theta: f64| {
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), theta);
        let m = rz * local;
        let d_alpha = ry * Vector3::y().cross(&m);
        let d_theta = ry * (rz * Vector3::z().cross(local));
        (offset + ry * m, d_alpha, d_theta)
    };
    match part {
        Part::Shaft => (*local, [zero; 3]),
        Part::Wrist => (
            offset + ry * local,
            [ry * Vector3::y().cross(local), zero, zero],
        ),
        Part::JawLeft => {
            let (p, da, dt) = jaw(pose.jaw_left);
            (p, [da, dt, zero])
        }
        Part::JawRight => {
            let (p, da, dt) = jaw(pose.jaw_right);
            (p, [da, zero, dt])
        }
    }
}

fn project_keypoints<'m>(
    pose: &InstrumentPose,
    model: &'m InstrumentModel,
    cam: &PinholeCamera,
    wanted: impl Fn(&str) -> bool,
) -> Result<Vec<Projected<'m>>, OptimError> {
    let r = pose.shaft.rotation_matrix();
    let t = pose.shaft.translation();
    let mut out = Vec::new();
    for kp in model.keypoints.iter().filter(|k| wanted(&k.label)) {
        let (ps, d_art) = shaft_frame_point(kp.part, &kp.position, pose, model);
        let pc = r * ps + t;
        let uv = cam
            .project(&pc)
            .map_err(|_| OptimError::KeypointBehindCamera {
                label: kp.label.clone(),
            })?;
        let mut jpc = Jacobian3::zeros();
        jpc.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r * skew(&ps)));
        jpc.fixed_view_mut::<3, 3>(0, 3).copy_from(&r);
        for (k, d) in d_art.iter().enumerate() {
            jpc.set_column(6 + k, &(r * d));
        }
        let jp: Matrix2x3<f64> = cam.project_jacobian(&pc);
        out.push(Projected {
            label: &kp.label,
            uv,
            jacobian: jp * jpc,
        });
    }
    Ok(out)
}

fn nearest(points: impl Iterator<Item = Vector2<f64>>, target: &Vector2<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.enumerate() {
        let d = (p - target).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Residual form of the keypoint loss in px.
///
/// Only model keypoints whose label occurs among the detections are projected, so
/// dropped detections do not pull their model point onto a neighbour.
pub fn keypoint_residuals(
    pose: &InstrumentPose,
    model: &InstrumentModel,
    obs: &FrameObservation,
    kind: KeypointLossKind,
) -> Result<Residuals, OptimError> {
    let detected = |label: &str| obs.keypoints.iter().any(|k| k.label == label);
    let projected = project_keypoints(pose, model, &obs.camera, detected)?;
    if projected.is_empty() {
        return Err(OptimError::NoMatchingKeypoints);
    }
    let mut res = Residuals::default();
    match kind {
        KeypointLossKind::Chamfer => {
            let dets: Vec<Vector2<f64>> = obs.keypoints.iter().map(Keypoint2D::uv).collect();
            let sp = (projected.len() as f64).sqrt().recip();
            for p in &projected {
                let j = nearest(dets.iter().copied(), &p.uv);
                res.push_scaled2(p.uv - dets[j], &p.jacobian, sp);
            }
            let sd = (dets.len() as f64).sqrt().recip();
            for d in &dets {
                let i = nearest(projected.iter().map(|p| p.uv), d);
                res.push_scaled2(projected[i].uv - d, &projected[i].jacobian, sd);
            }
        }
        KeypointLossKind::Labeled => {
            let pairs: Vec<(&Projected, Vector2<f64>)> = obs
                .keypoints
                .iter()
                .filter_map(|k| {
                    projected
                        .iter()
                        .find(|p| p.label == k.label)
                        .map(|p| (p, k.uv()))
                })
                .collect();
            let s = (pairs.len() as f64).sqrt().recip();
            for (p, d) in pairs {
                res.push_scaled2(p.uv - d, &p.jacobian, s);
            }
        }
    }
    Ok(res)
}

/// Chamfer keypoint loss in px² with its gradient.
pub fn keypoint_loss(
    pose: &InstrumentPose,
    model: &InstrumentModel,
    obs: &FrameObservation,
) -> Result<LossValue, OptimError> {
    keypoint_loss_with(pose, model, obs, KeypointLossKind::Chamfer)
}

pub fn keypoint_loss_with(
    pose: &InstrumentPose,
    model: &InstrumentModel,
    obs: &FrameObservation,
    kind: KeypointLossKind,
) -> Result<LossValue, OptimError> {
    let res = keypoint_residuals(pose, model, obs, kind)?;
    Ok(LossValue {
        value: res.cost(),
        gradient: res.gradient(),
    })
}

/// `(I - x xᵀ)(p - o)` for the shaft line of `pose`, with its Jacobian.
pub fn rcm_residual(pose: &InstrumentPose, p_rcm: &Vector3<f64>) -> (Vector3<f64>, Jacobian3) {
    let r = pose.shaft.rotation_matrix();
    let x = r.column(0).into_owned();
    let d = p_rcm - pose.shaft.translation();
    let projector = nalgebra::Matrix3::identity() - x * x.transpose();
    let residual = projector * d;
    let mut j = Jacobian3::zeros();
    let d_omega = (nalgebra::Matrix3::identity() * x.dot(&d) + x * d.transpose())
        * r
        * skew(&Vector3::x());
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&d_omega);
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-projector * r));
    (residual, j)
}

/// Mean squared perpendicular distance from `p_rcm` to each pose's shaft line, mm².
pub fn rcm_loss(poses: &[InstrumentPose], p_rcm: &Vector3<f64>) -> RcmLoss {
    let n = poses.len().max(1) as f64;
    let mut value = 0.0;
    let gradients = poses
        .iter()
        .map(|pose| {
            let (r, j) = rcm_residual(pose, p_rcm);
            value += r.norm_squared() / n;
            let g = j.transpose() * r * (2.0 / n);
            g.fixed_rows::<6>(0).into_owned()
        })
        .collect();
    RcmLoss { value, gradients }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::RigidTransform;
    use crate::kinematics::keypoints_3d;
    use approx::assert_abs_diff_eq;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera() -> PinholeCamera {
        PinholeCamera::new(900.0, 900.0, 320.0, 256.0, 640, 512)
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> InstrumentPose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let rot = UnitQuaternion::from_scaled_axis(axis);
        let t = Vector3::new(
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(90.0..130.0),
        );
        InstrumentPose::new(
            RigidTransform::new(rot, t),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.0..0.8),
            rng.random_range(-0.8..0.0),
        )
    }

    fn observe(pose: &InstrumentPose, model: &InstrumentModel, noise: f64, rng: &mut ChaCha8Rng) -> FrameObservation {
        let cam = camera();
        let keypoints = keypoints_3d(pose, model)
            .into_iter()
            .map(|(label, p)| {
                let jitter = Vector2::new(rng.random_range(-noise..=noise), rng.random_range(-noise..=noise));
                Keypoint2D::new(label, cam.project(&p).unwrap() + jitter)
            })
            .collect();
        FrameObservation {
            keypoints,
            camera: cam,
        }
    }

    fn central_difference(f: impl Fn(&StateVector) -> f64, h: f64) -> StateVector {
        let mut g = StateVector::zeros();
        for k in 0..STATE_DIM {
            let mut e = StateVector::zeros();
            e[k] = h;
            g[k] = (f(&e) - f(&(-e))) / (2.0 * h);
        }
        g
    }

    fn relative_error(a: &StateVector, b: &StateVector) -> f64 {
        (a - b).norm() / a.norm().max(b.norm()).max(1e-12)
    }

    #[test]
    fn exact_detections_give_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = InstrumentModel::default();
        let pose = random_pose(&mut rng);
        let obs = observe(&pose, &model, 0.0, &mut rng);
        for kind in [KeypointLossKind::Chamfer, KeypointLossKind::Labeled] {
            let l = keypoint_loss_with(&pose, &model, &obs, kind).unwrap();
            assert_abs_diff_eq!(l.value, 0.0, epsilon = 1e-18);
            assert_abs_diff_eq!(l.gradient.norm(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_offset_keypoint() {
        let model = InstrumentModel {
            keypoints: vec![crate::kinematics::ModelKeypoint::new(
                Part::Shaft,
                "p",
                Vector3::zeros(),
            )],
            ..InstrumentModel::default()
        };
        let pose = InstrumentPose::new(
            RigidTransform::from_translation(Vector3::new(0.0, 0.0, 100.0)),
            0.0,
            0.0,
            0.0,
        );
        let cam = camera();
        let obs = FrameObservation {
            keypoints: vec![Keypoint2D::new("p", Vector2::new(320.0 + 3.0, 256.0 + 4.0))],
            camera: cam,
        };
        let chamfer = keypoint_loss(&pose, &model, &obs).unwrap();
        assert_abs_diff_eq!(chamfer.value, 50.0, epsilon = 1e-9);
        let labeled = keypoint_loss_with(&pose, &model, &obs, KeypointLossKind::Labeled).unwrap();
        assert_abs_diff_eq!(labeled.value, 25.0, epsilon = 1e-9);
    }

    #[test]
    fn keypoint_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = InstrumentModel::default();
        for kind in [KeypointLossKind::Chamfer, KeypointLossKind::Labeled] {
            for _ in 0..100 {
                let pose = random_pose(&mut rng);
                let obs = observe(&random_pose_near(&pose, &mut rng), &model, 3.0, &mut rng);
                let analytic = keypoint_loss_with(&pose, &model, &obs, kind).unwrap().gradient;
                let numeric = central_difference(
                    |d| {
                        keypoint_loss_with(&retract_pose(&pose, d), &model, &obs, kind)
                            .unwrap()
                            .value
                    },
                    1e-6,
                );
                assert!(relative_error(&analytic, &numeric) < 1e-4);
            }
        }
    }

    fn random_pose_near(pose: &InstrumentPose, rng: &mut ChaCha8Rng) -> InstrumentPose {
        let mut d = StateVector::zeros();
        for k in 0..STATE_DIM {
            d[k] = rng.random_range(-0.05..0.05);
        }
        retract_pose(pose, &d)
    }

    #[test]
    fn rcm_loss_of_lines_through_pivot_is_zero() {
        let pivot = Vector3::new(1.0, -2.0, 3.0);
        let poses: Vec<InstrumentPose> = (0..5)
            .map(|k| {
                let q = UnitQuaternion::from_euler_angles(0.1 * k as f64, -0.2 * k as f64, 0.3);
                let x = q * Vector3::x();
                InstrumentPose::new(RigidTransform::new(q, pivot + x * (40.0 + k as f64)), 0.0, 0.0, 0.0)
            })
            .collect();
        let l = rcm_loss(&poses, &pivot);
        assert_abs_diff_eq!(l.value, 0.0, epsilon = 1e-20);
        for g in l.gradients {
            assert_abs_diff_eq!(g.norm(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn rcm_loss_single_miss() {
        let d = 2.5;
        let through = InstrumentPose::new(RigidTransform::from_translation(Vector3::new(30.0, 0.0, 0.0)), 0.0, 0.0, 0.0);
        let miss = InstrumentPose::new(RigidTransform::from_translation(Vector3::new(30.0, d, 0.0)), 0.0, 0.0, 0.0);
        let poses = [through, through, miss, through];
        let l = rcm_loss(&poses, &Vector3::zeros());
        assert_abs_diff_eq!(l.value, d * d / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn rcm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.random_range(1..6);
            let poses: Vec<InstrumentPose> = (0..n).map(|_| random_pose(&mut rng)).collect();
            let p = Vector3::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(0.0..50.0),
            );
            let l = rcm_loss(&poses, &p);
            for (i, g) in l.gradients.iter().enumerate() {
                let numeric = central_difference(
                    |d| {
                        let mut moved = poses.clone();
                        moved[i] = retract_pose(&poses[i], d);
                        rcm_loss(&moved, &p).value
                    },
                    1e-6,
                );
                let mut analytic = StateVector::zeros();
                analytic.fixed_rows_mut::<6>(0).copy_from(g);
                assert!(relative_error(&analytic, &numeric) < 1e-4);
            }
        }
    }

    #[test]
    fn behind_camera_is_an_error() {
        let model = InstrumentModel::default();
        let pose = InstrumentPose::new(
            RigidTransform::from_translation(Vector3::new(0.0, 0.0, -50.0)),
            0.0,
            0.0,
            0.0,
        );
        let obs = FrameObservation {
            keypoints: vec![Keypoint2D::new("wrist", Vector2::new(1.0, 1.0))],
            camera: camera(),
        };
        assert!(matches!(
            keypoint_loss(&pose, &model, &obs),
            Err(OptimError::KeypointBehindCamera { .. })
        ));
    }
}
