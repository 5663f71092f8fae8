//! Weighted rigid point-set alignment (Kabsch-Umeyama without scale).

use nalgebra::{Matrix3, Vector3};

use super::EstimatorError;
use crate::geom::RigidTransform;

const COLLINEAR_RATIO: f64 = 1e-12;

/// Returns `T = [R | t]` minimizing `Σ wₙ ‖dst_n - (R·src_n + t)‖²` with `det R = +1`.
///
/// `weights` defaults to uniform.
pub fn kabsch_umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    weights: Option<&[f64]>,
) -> Result<RigidTransform, EstimatorError> {
    if src.len() != dst.len() {
        return Err(EstimatorError::LengthMismatch {
            src: src.len(),
            dst: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(EstimatorError::InsufficientPoints {
            needed: 3,
            got: src.len(),
        });
    }
    let uniform;
    let w = match weights {
        Some(w) => {
            if w.len() != src.len() {
                return Err(EstimatorError::InvalidWeights(format!(
                    "expected {} weights, got {}",
                    src.len(),
                    w.len()
                )));
            }
            if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(EstimatorError::InvalidWeights("weights must be finite and >= 0".into()));
            }
            w
        }
        None => {
            uniform = vec![1.0; src.len()];
            &uniform[..]
        }
    };
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(EstimatorError::InvalidWeights("weights are all zero".into()));
    }

    let centroid = |pts: &[Vector3<f64>]| -> Vector3<f64> {
        pts.iter().zip(w).map(|(p, &wi)| p * wi).sum::<Vector3<f64>>() / total
    };
    let cs = centroid(src);
    let cd = centroid(dst);

    let mut spread = Matrix3::zeros();
    let mut cross = Matrix3::zeros();
    for ((s, d), &wi) in src.iter().zip(dst).zip(w) {
        let sc = s - cs;
        let dc = d - cd;
        spread += sc * sc.transpose() * wi;
        cross += dc * sc.transpose() * wi;
    }

    let mut eig = spread.symmetric_eigen().eigenvalues;
    eig.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if !(eig[1] > COLLINEAR_RATIO * eig[0]) {
        return Err(EstimatorError::DegenerateConfiguration);
    }

    // cross = Σ dst_c src_cᵀ = U Σ Vᵀ  →  R = U diag(1, 1, sign) Vᵀ.
    let svd = cross.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let sign = (u * v_t).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let rotation = u * correction * v_t;
    let t = cd - rotation * cs;
    Ok(RigidTransform::from_matrix_parts(&rotation, t))
}

/// Root-mean-square deviation of `dst` from `transform · src`.
pub fn alignment_rmsd(transform: &RigidTransform, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
    if src.is_empty() {
        return 0.0;
    }
    let sum: f64 = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (d - transform.transform_point(s)).norm_squared())
        .sum();
    (sum / src.len() as f64).sqrt()
}
