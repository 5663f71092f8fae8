//! Shared fixtures for the criterion benches.

use nalgebra::{UnitQuaternion, Vector3};
use rcmcal_core::{Correspondence2D3D, Line3, PinholeCamera, RigidTransform};

/// Deterministic unit direction spread over the sphere (golden-angle spiral).
fn spiral_direction(k: usize, n: usize) -> Vector3<f64> {
    let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
    let r = (1.0 - z * z).sqrt();
    let phi = k as f64 * 2.399_963_229_728_653;
    Vector3::new(r * phi.cos(), r * phi.sin(), z)
}

/// `n` lines through `pivot`, every fifth one shifted 20 mm sideways.
pub fn line_bundle(n: usize, pivot: Vector3<f64>) -> Vec<Line3> {
    (0..n)
        .map(|k| {
            let dir = spiral_direction(k, n);
            let through = if k % 5 == 4 {
                pivot + dir.cross(&Vector3::new(0.3, 1.0, -0.2)).normalize() * 20.0
            } else {
                pivot
            };
            Line3::new(through - dir * (k as f64 % 7.0) * 8.0, dir).expect("unit direction")
        })
        .collect()
}

pub fn camera() -> PinholeCamera {
    PinholeCamera::new(900.0, 900.0, 320.0, 256.0, 640, 512)
}

/// Noiseless 2D-3D correspondences of `n` points seen from a fixed pose.
pub fn epnp_problem(n: usize) -> (Vec<Correspondence2D3D>, RigidTransform) {
    let truth = RigidTransform::new(
        UnitQuaternion::from_euler_angles(0.3, -0.5, 1.2),
        Vector3::new(5.0, -8.0, 140.0),
    );
    let cam = camera();
    let corrs = (0..n)
        .map(|k| {
            let obj = spiral_direction(k, n) * (10.0 + (k % 3) as f64 * 5.0);
            let uv = cam.project(&truth.transform_point(&obj)).expect("in front");
            Correspondence2D3D::new(format!("p{k}"), uv, obj)
        })
        .collect();
    (corrs, truth)
}

/// Point pairs related by a fixed rigid transform.
pub fn alignment_problem(n: usize) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let t = RigidTransform::new(
        UnitQuaternion::from_euler_angles(0.4, -0.6, 1.1),
        Vector3::new(120.0, -80.0, 260.0),
    );
    let src: Vec<Vector3<f64>> = (0..n).map(|k| spiral_direction(k, n) * 40.0).collect();
    let dst = src.iter().map(|p| t.transform_point(p)).collect();
    (src, dst)
}
