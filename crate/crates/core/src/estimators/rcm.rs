//! Least-squares intersection of shaft centerlines and its outlier-rejecting variant.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::EstimatorError;
use crate::geom::{point_line_distance_vector, Line3};

/// Bundles whose normal matrix exceeds this condition number are rejected.
pub const MAX_CONDITION_NUMBER: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcmEstimate {
    /// RCM position in the camera frame, mm.
    pub point: Vector3<f64>,
    pub inliers: Vec<bool>,
    /// Root mean squared perpendicular distance over the inlier lines, mm.
    pub rms_residual: f64,
    /// Classification rounds performed.
    pub rounds: usize,
    /// Fewer than three lines support the estimate.
    pub low_confidence: bool,
}

impl RcmEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Point minimizing the summed squared perpendicular distances to `lines`.
///
/// Solves `Σ(I - x xᵀ) p = Σ(I - x xᵀ) o` in closed form.
pub fn estimate_rcm(lines: &[Line3]) -> Result<Vector3<f64>, EstimatorError> {
    if lines.len() < 2 {
        return Err(EstimatorError::InsufficientLines {
            needed: 2,
            got: lines.len(),
        });
    }
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for line in lines {
        let proj = line.normal_projector();
        a += proj;
        b += proj * line.origin();
    }
    let eig = a.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION_NUMBER) {
        return Err(EstimatorError::NearParallelBundle { condition });
    }
    // a is symmetric positive definite here, so the eigen-decomposition doubles as the solver.
    let ut_b = eig.eigenvectors.transpose() * b;
    let scaled = ut_b.component_div(&eig.eigenvalues);
    Ok(eig.eigenvectors * scaled)
}

/// `Σ ‖(I - x xᵀ)(p - o)‖²` over the given lines.
pub fn rcm_residual_sum(point: &Vector3<f64>, lines: &[Line3]) -> f64 {
    lines
        .iter()
        .map(|l| point_line_distance_vector(point, l).norm_squared())
        .sum()
}

/// Alternates [`estimate_rcm`] on the current inliers with re-classification
/// (inlier iff perpendicular distance ≤ `residual_threshold`) until the inlier set
/// is stable or `max_rounds` is reached. All lines start as inliers.
pub fn estimate_rcm_robust(
    lines: &[Line3],
    residual_threshold: f64,
    max_rounds: usize,
) -> Result<RcmEstimate, EstimatorError> {
    if lines.len() < 2 {
        return Err(EstimatorError::InsufficientLines {
            needed: 2,
            got: lines.len(),
        });
    }
    let mut mask = vec![true; lines.len()];
    let mut point = estimate_rcm(lines)?;
    let mut rounds = 0;
    while rounds < max_rounds.max(1) {
        rounds += 1;
        let next: Vec<bool> = lines
            .iter()
            .map(|l| point_line_distance_vector(&point, l).norm() <= residual_threshold)
            .collect();
        let count = next.iter().filter(|&&b| b).count();
        if count < 2 {
            return Err(EstimatorError::NoConsensus { inliers: count });
        }
        if next == mask {
            break;
        }
        mask = next;
        point = estimate_rcm(&select(lines, &mask))?;
    }
    let inlier_lines = select(lines, &mask);
    let rms_residual = (rcm_residual_sum(&point, &inlier_lines) / inlier_lines.len() as f64).sqrt();
    Ok(RcmEstimate {
        point,
        low_confidence: inlier_lines.len() < 3,
        inliers: mask,
        rms_residual,
        rounds,
    })
}

fn select(lines: &[Line3], mask: &[bool]) -> Vec<Line3> {
    lines
        .iter()
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|(l, _)| *l)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn random_direction(rng: &mut impl Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if v.norm() > 0.2 {
                return v.normalize();
            }
        }
    }

    fn line_through(p: &Vector3<f64>, dir: Vector3<f64>, gamma: f64) -> Line3 {
        Line3::new(p - dir.normalize() * gamma, dir).unwrap()
    }

    #[test]
    fn exact_intersection() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        let lines = [
            line_through(&p, Vector3::new(1.0, 0.0, 0.0), 4.0),
            line_through(&p, Vector3::new(0.0, 1.0, 0.2), -7.0),
            line_through(&p, Vector3::new(0.3, -0.5, 1.0), 11.0),
        ];
        assert_abs_diff_eq!(estimate_rcm(&lines).unwrap(), p, epsilon = 1e-9);
    }

    #[test]
    fn skew_lines_give_common_perpendicular_midpoint() {
        // x-axis at z = 0 and a y-parallel line at z = 4: the common perpendicular is the
        // z-axis segment from (0,0,0) to (0,0,4), offset by the anchor points below.
        let a = Line3::new(Vector3::new(-3.0, 1.5, 0.0), Vector3::x()).unwrap();
        let b = Line3::new(Vector3::new(2.0, 9.0, 4.0), Vector3::y()).unwrap();
        // Closest points: on a at x = 2 (b's x), on b at y = 1.5 (a's y).
        let pa = Vector3::new(2.0, 1.5, 0.0);
        let pb = Vector3::new(2.0, 1.5, 4.0);
        assert_abs_diff_eq!(estimate_rcm(&[a, b]).unwrap(), (pa + pb) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn parallel_bundle_rejected() {
        let lines: Vec<Line3> = (0..5)
            .map(|i| Line3::new(Vector3::new(i as f64, 2.0 * i as f64, 0.0), Vector3::new(0.0, 0.0, 1.0)).unwrap())
            .collect();
        assert!(matches!(estimate_rcm(&lines), Err(EstimatorError::NearParallelBundle { .. })));
    }

    #[test]
    fn robust_rejects_offset_outliers() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let p = Vector3::new(-20.0, 15.0, 40.0);
        let mut lines: Vec<Line3> = (0..10)
            .map(|_| line_through(&p, random_direction(&mut rng), rng.random_range(-50.0..50.0)))
            .collect();
        for _ in 0..2 {
            let dir = random_direction(&mut rng);
            let off = dir.cross(&random_direction(&mut rng)).normalize() * 20.0;
            lines.push(line_through(&(p + off), dir, 10.0));
        }
        let est = estimate_rcm_robust(&lines, 5.0, 5).unwrap();
        assert_abs_diff_eq!(est.point, p, epsilon = 1e-9);
        assert_eq!(&est.inliers[..10], &[true; 10]);
        assert_eq!(&est.inliers[10..], &[false; 2]);
        assert!(!est.low_confidence);
    }

    #[test]
    fn robust_converges_in_one_round_on_clean_bundle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let p = Vector3::new(3.0, -1.0, 7.0);
        let lines: Vec<Line3> = (0..6).map(|_| line_through(&p, random_direction(&mut rng), 5.0)).collect();
        let est = estimate_rcm_robust(&lines, 3.0, 5).unwrap();
        assert_eq!(est.rounds, 1);
        assert!(est.inliers.iter().all(|&b| b));
        assert!(est.rms_residual < 1e-9);
    }

    #[test]
    fn zero_threshold_with_noise_loses_consensus() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let p = Vector3::new(0.0, 0.0, 50.0);
        let lines: Vec<Line3> = (0..8)
            .map(|_| {
                let noise = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                line_through(&(p + noise), random_direction(&mut rng), 20.0)
            })
            .collect();
        assert!(matches!(estimate_rcm_robust(&lines, 0.0, 5), Err(EstimatorError::NoConsensus { .. })));
    }

    #[test]
    fn infinite_threshold_equals_plain_estimate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let lines: Vec<Line3> = (0..12)
            .map(|_| {
                let o = Vector3::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));
                Line3::new(o, random_direction(&mut rng)).unwrap()
            })
            .collect();
        let est = estimate_rcm_robust(&lines, f64::INFINITY, 5).unwrap();
        assert_eq!(est.point, estimate_rcm(&lines).unwrap());
    }

    #[test]
    fn two_lines_are_low_confidence() {
        let p = Vector3::new(1.0, 1.0, 1.0);
        let lines = [line_through(&p, Vector3::x(), 0.0), line_through(&p, Vector3::y(), 0.0)];
        let est = estimate_rcm_robust(&lines, 3.0, 5).unwrap();
        assert!(est.low_confidence);
    }

    #[test]
    fn estimate_is_a_local_minimum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let lines: Vec<Line3> = (0..rng.random_range(2..15))
                .map(|_| {
                    let o = Vector3::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));
                    Line3::new(o, random_direction(&mut rng)).unwrap()
                })
                .collect();
            let Ok(p) = estimate_rcm(&lines) else { continue };
            let base = rcm_residual_sum(&p, &lines);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if (dx, dy, dz) == (0, 0, 0) {
                            continue;
                        }
                        let d = Vector3::new(dx as f64, dy as f64, dz as f64) * 1e-4;
                        assert!(rcm_residual_sum(&(p + d), &lines) >= base);
                    }
                }
            }
        }
    }
}
