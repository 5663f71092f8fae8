//! Pinhole projection, stereo triangulation and pixel-to-millimetre scaling.

use nalgebra::{Matrix2x3, Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::RigidTransform;

/// Points closer than this to the camera plane cannot be projected.
pub const MIN_DEPTH_MM: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point is behind the camera (z = {z} mm)")]
    BehindCamera { z: f64 },
    #[error("triangulation geometry is degenerate")]
    DegenerateGeometry,
    #[error("depth must be positive, got {0} mm")]
    NonPositiveDepth(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// Distortion-free pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CameraError::InvalidCamera("focal lengths must be > 0".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64)
            || !(self.cy > 0.0 && self.cy < self.height as f64)
        {
            return Err(CameraError::InvalidCamera(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(())
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        if !(p.z > MIN_DEPTH_MM) {
            return Err(CameraError::BehindCamera { z: p.z });
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Derivative of [`PinholeCamera::project`] with respect to the camera-frame point.
    pub fn project_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }

    /// Normalized image coordinates `K⁻¹ [u, v, 1]` (first two components).
    pub fn normalize(&self, uv: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((uv.x - self.cx) / self.fx, (uv.y - self.cy) / self.fy)
    }

    pub fn contains(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= 0.0 && uv.y >= 0.0 && uv.x < self.width as f64 && uv.y < self.height as f64
    }

    pub fn intrinsic_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// `(fx·x/z + cx, fy·y/z + cy)`.
pub fn project(cam: &PinholeCamera, p: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
    cam.project(p)
}

/// Millimetres per pixel at depth `depth`: `Z / fx`.
pub fn px_to_mm_scale(cam: &PinholeCamera, depth: f64) -> Result<f64, CameraError> {
    if !(depth > 0.0) {
        return Err(CameraError::NonPositiveDepth(depth));
    }
    Ok(depth / cam.fx)
}

/// Calibrated stereo pair; the left camera frame is the reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    pub left: PinholeCamera,
    pub right: PinholeCamera,
    pub right_from_left: RigidTransform,
}

impl StereoRig {
    pub fn baseline(&self) -> f64 {
        self.right_from_left.translation().norm()
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        self.left.validate()?;
        self.right.validate()?;
        if !(self.baseline() > 0.0) {
            return Err(CameraError::InvalidCamera("stereo baseline must be > 0".into()));
        }
        Ok(())
    }

    pub fn project_left(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        self.left.project(p)
    }

    pub fn project_right(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        self.right
            .project(&self.right_from_left.transform_point(p))
    }
}

const GN_MAX_ITERATIONS: usize = 10;
const GN_STEP_TOLERANCE: f64 = 1e-10;
const DEGENERACY_RATIO: f64 = 1e-12;

/// Least-squares stereo triangulation in the left camera frame.
///
/// Linear DLT on normalized coordinates gives the starting point; Gauss-Newton then
/// minimizes the summed squared pixel reprojection error in both views.
pub fn triangulate(
    rig: &StereoRig,
    x_left: &Vector2<f64>,
    x_right: &Vector2<f64>,
) -> Result<Vector3<f64>, CameraError> {
    if !(x_left.iter().chain(x_right.iter()).all(|v| v.is_finite())) {
        return Err(CameraError::DegenerateGeometry);
    }
    let nl = rig.left.normalize(x_left);
    let nr = rig.right.normalize(x_right);
    let r = rig.right_from_left.rotation_matrix();
    let t = rig.right_from_left.translation();

    // Rows of P_l = [I | 0] and P_r = [R | t] in normalized coordinates.
    let pl = Matrix4::<f64>::identity();
    let mut pr = Matrix4::identity();
    pr.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    pr.fixed_view_mut::<3, 1>(0, 3).copy_from(t);

    let mut a = Matrix4::zeros();
    a.set_row(0, &(pl.row(2) * nl.x - pl.row(0)));
    a.set_row(1, &(pl.row(2) * nl.y - pl.row(1)));
    a.set_row(2, &(pr.row(2) * nr.x - pr.row(0)));
    a.set_row(3, &(pr.row(2) * nr.y - pr.row(1)));
    for mut row in a.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(CameraError::DegenerateGeometry)?;
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s_max = svd.singular_values[order[0]];
    let s_third = svd.singular_values[order[2]];
    if !(s_max > 0.0) || s_third <= DEGENERACY_RATIO * s_max {
        return Err(CameraError::DegenerateGeometry);
    }
    let h = v_t.row(order[3]).transpose();
    if h[3].abs() <= f64::EPSILON * h.norm() {
        return Err(CameraError::DegenerateGeometry);
    }
    let mut x = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);

    for _ in 0..GN_MAX_ITERATIONS {
        let xr = rig.right_from_left.transform_point(&x);
        if x.z <= MIN_DEPTH_MM || xr.z <= MIN_DEPTH_MM {
            break;
        }
        let res_l = rig.left.project(&x)? - x_left;
        let res_r = rig.right.project(&xr)? - x_right;
        let jl = rig.left.project_jacobian(&x);
        let jr = rig.right.project_jacobian(&xr) * r;
        let jtj = jl.transpose() * jl + jr.transpose() * jr;
        let jtr = jl.transpose() * res_l + jr.transpose() * res_r;
        let Some(step) = jtj.cholesky().map(|c| c.solve(&(-jtr))) else {
            break;
        };
        x += step;
        if step.norm() < GN_STEP_TOLERANCE {
            break;
        }
    }
    Ok(x)
}
