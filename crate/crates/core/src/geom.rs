//! Rigid-body geometry: SE(3) transforms, tangent-space twists and 3D lines.
//!
//! Transforms act on column points, `p' = R·p + t`. Composition follows the
//! matrix-product convention, so `a.compose(&b)` applies `b` first.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Quaternion, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rotation angles at or above this bound are outside the domain of [`RigidTransform::log`].
pub const LOG_ANGLE_LIMIT: f64 = std::f64::consts::PI - 1e-6;

// Below this angle the V-matrix coefficients use their Taylor series.
const SERIES_THRESHOLD: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("rotation angle {angle} rad is outside the logarithm domain (< pi - 1e-6)")]
    LogDomain { angle: f64 },
    #[error("line direction has zero length")]
    ZeroDirection,
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
}

/// Skew-symmetric cross-product matrix, `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// An element of SE(3): unit quaternion rotation plus translation in mm.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "TransformRecord", try_from = "TransformRecord")]
pub struct RigidTransform {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl fmt::Debug for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.rotation.quaternion();
        write!(
            f,
            "RigidTransform {{ quat: [{}, {}, {}, {}], trans: [{}, {}, {}] }}",
            q.w, q.i, q.j, q.k, self.translation.x, self.translation.y, self.translation.z
        )
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: renormalize(rotation),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Builds a transform from a rotation matrix; the matrix is projected onto SO(3).
    pub fn from_matrix_parts(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix(rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// Quaternion given as `(w, x, y, z)`; it is normalized.
    pub fn from_wxyz(q: [f64; 4], translation: [f64; 3]) -> Result<Self, GeomError> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(GeomError::ZeroQuaternion);
        }
        Ok(Self {
            rotation: normalize_quaternion(quat),
            translation: Vector3::from(translation),
        })
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_rotation(UnitQuaternion::from_axis_angle(&Vector3::x_axis(), angle))
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_rotation(UnitQuaternion::from_axis_angle(&Vector3::y_axis(), angle))
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_rotation(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle))
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Homogeneous 4x4 matrix.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self · other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let inv = self.rotation.inverse();
        RigidTransform {
            rotation: renormalize(inv),
            translation: -(inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Angle of the relative rotation `self⁻¹ · other`.
    pub fn rotation_distance(&self, other: &RigidTransform) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn translation_distance(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// SE(3) exponential map.
    pub fn exp(xi: &Twist) -> RigidTransform {
        let theta = xi.rotation.norm();
        let rotation = UnitQuaternion::from_scaled_axis(xi.rotation);
        let w = skew(&xi.rotation);
        let (a, b) = if theta < SERIES_THRESHOLD {
            let t2 = theta * theta;
            (
                0.5 - t2 / 24.0 + t2 * t2 / 720.0,
                1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            )
        } else {
            let half_sin = (0.5 * theta).sin();
            (
                2.0 * half_sin * half_sin / (theta * theta),
                (theta - theta.sin()) / (theta * theta * theta),
            )
        };
        let v = Matrix3::identity() + w * a + w * w * b;
        RigidTransform::new(rotation, v * xi.translation)
    }

    /// SE(3) logarithm; fails when the rotation angle reaches `pi - 1e-6`.
    pub fn log(&self) -> Result<Twist, GeomError> {
        let omega = self.rotation.scaled_axis();
        let theta = omega.norm();
        if theta >= LOG_ANGLE_LIMIT {
            return Err(GeomError::LogDomain { angle: theta });
        }
        let w = skew(&omega);
        let c = if theta < SERIES_THRESHOLD {
            let t2 = theta * theta;
            1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
        } else {
            let half = 0.5 * theta;
            (1.0 - half / half.tan()) / (theta * theta)
        };
        let v_inv = Matrix3::identity() - w * 0.5 + w * w * c;
        Ok(Twist {
            rotation: omega,
            translation: v_inv * self.translation,
        })
    }

    /// Right (body-frame) perturbation, `self · exp(xi)`.
    pub fn retract(&self, xi: &Twist) -> RigidTransform {
        self.compose(&RigidTransform::exp(xi))
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a RigidTransform> for &'a RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: &'a RigidTransform) -> RigidTransform {
        self.compose(rhs)
    }
}

// Quaternions already unit to within a few ulps are kept bit-for-bit, so that
// serialization round trips are exact.
fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    normalize_quaternion(q.into_inner())
}

fn normalize_quaternion(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    if (q.norm_squared() - 1.0).abs() <= 8.0 * f64::EPSILON {
        Unit::new_unchecked(q)
    } else {
        Unit::new_normalize(q)
    }
}

/// Wire form of a transform: `{"quat": [w, x, y, z], "trans": [x, y, z]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformRecord {
    pub quat: [f64; 4],
    pub trans: [f64; 3],
}

impl From<RigidTransform> for TransformRecord {
    fn from(t: RigidTransform) -> Self {
        let q = t.rotation.quaternion();
        TransformRecord {
            quat: [q.w, q.i, q.j, q.k],
            trans: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TryFrom<TransformRecord> for RigidTransform {
    type Error = GeomError;

    fn try_from(r: TransformRecord) -> Result<Self, Self::Error> {
        RigidTransform::from_wxyz(r.quat, r.trans)
    }
}

/// Tangent vector of SE(3): rotation (rad) and translation (mm) parts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Twist {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Ordered as `[wx, wy, wz, vx, vy, vz]`.
    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            rotation: Vector3::new(v[0], v[1], v[2]),
            translation: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }
}

/// Oriented 3D line `p(γ) = origin + γ·direction` with a unit direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line3 {
    origin: Vector3<f64>,
    direction: Vector3<f64>,
}

impl Line3 {
    /// Normalizes `direction`.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Result<Self, GeomError> {
        let norm = direction.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(GeomError::ZeroDirection);
        }
        Ok(Self {
            origin,
            direction: direction / norm,
        })
    }

    pub fn origin(&self) -> &Vector3<f64> {
        &self.origin
    }

    pub fn direction(&self) -> &Vector3<f64> {
        &self.direction
    }

    pub fn point_at(&self, gamma: f64) -> Vector3<f64> {
        self.origin + self.direction * gamma
    }

    /// Orthogonal projector `I - x xᵀ` onto the plane normal to the line.
    pub fn normal_projector(&self) -> Matrix3<f64> {
        Matrix3::identity() - self.direction * self.direction.transpose()
    }

    pub fn distance_to(&self, p: &Vector3<f64>) -> f64 {
        point_line_distance_vector(p, self).norm()
    }
}

/// `(I - x xᵀ)(p - o)`: the perpendicular residual from the line to `p`.
pub fn point_line_distance_vector(p: &Vector3<f64>, line: &Line3) -> Vector3<f64> {
    let d = p - line.origin;
    d - line.direction * line.direction.dot(&d)
}
