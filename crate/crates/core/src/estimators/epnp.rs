//! EPnP pose initialization with Gauss-Newton polishing.
//!
//! Object points are expressed as barycentric combinations of control points placed
//! along the principal axes of the point cloud. The camera-frame control points lie
//! in the null space of a `2n × 3c` linear system; the null-space coefficients (the
//! betas) are fixed by the rigidity of inter-control-point distances. Three
//! linearized beta hypotheses (one, two and three kernel vectors) are each refined
//! with Gauss-Newton, the best by reprojection error is kept, and the pose is then
//! polished on the pixel reprojection error.
//!
//! Near-planar objects (smallest principal variance below `1e-8` of the largest) use
//! three control points instead of four.

use nalgebra::{DMatrix, DVector, Matrix6, SymmetricEigen, Vector2, Vector3, Vector6};

use super::{kabsch_umeyama, Correspondence2D3D, EstimatorError};
use crate::camera::PinholeCamera;
use crate::geom::{skew, RigidTransform, Twist};

const COLLINEAR_RATIO: f64 = 1e-10;
const PLANAR_RATIO: f64 = 1e-8;
const BETA_GN_ITERATIONS: usize = 5;
const POSE_GN_ITERATIONS: usize = 20;

pub fn solve_epnp(
    corrs: &[Correspondence2D3D],
    cam: &PinholeCamera,
) -> Result<RigidTransform, EstimatorError> {
    if corrs.len() < 4 {
        return Err(EstimatorError::InsufficientPoints {
            needed: 4,
            got: corrs.len(),
        });
    }
    for (i, c) in corrs.iter().enumerate() {
        if corrs[..i].iter().any(|o| o.label == c.label) {
            return Err(EstimatorError::DuplicateLabel(c.label.clone()));
        }
    }

    let controls = ControlPoints::fit(corrs)?;
    let alphas: Vec<Vec<f64>> = corrs.iter().map(|c| controls.barycentric(&c.object)).collect();
    let kernel = null_space(corrs, &alphas, cam, controls.count());

    let mut best: Option<(f64, RigidTransform)> = None;
    for n in 1..=3 {
        let Some(betas) = linearized_betas(&kernel, &controls, n) else {
            continue;
        };
        let betas = refine_betas(&kernel, &controls, betas);
        let Some(pose) = pose_from_betas(&kernel, &betas, &alphas, corrs) else {
            continue;
        };
        let Ok(rms) = reprojection_rms(&pose, corrs, cam) else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| rms < *b) {
            best = Some((rms, pose));
        }
    }
    let (rms, pose) = best.ok_or(EstimatorError::AllCandidatesBehindCamera)?;
    Ok(polish_pose(pose, rms, corrs, cam))
}

/// Root-mean-square pixel reprojection error of `cam_from_object` over `corrs`.
pub fn reprojection_rms(
    cam_from_object: &RigidTransform,
    corrs: &[Correspondence2D3D],
    cam: &PinholeCamera,
) -> Result<f64, crate::camera::CameraError> {
    let mut sum = 0.0;
    for c in corrs {
        let uv = cam.project(&cam_from_object.transform_point(&c.object))?;
        sum += (uv - c.image).norm_squared();
    }
    Ok((sum / corrs.len() as f64).sqrt())
}

struct ControlPoints {
    centroid: Vector3<f64>,
    /// Principal axes scaled by the standard deviation along them.
    axes: Vec<Vector3<f64>>,
}

impl ControlPoints {
    fn fit(corrs: &[Correspondence2D3D]) -> Result<Self, EstimatorError> {
        let n = corrs.len() as f64;
        let centroid = corrs.iter().map(|c| c.object).sum::<Vector3<f64>>() / n;
        let cov = corrs
            .iter()
            .map(|c| {
                let d = c.object - centroid;
                d * d.transpose()
            })
            .sum::<nalgebra::Matrix3<f64>>()
            / n;
        let eig = cov.symmetric_eigen();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        if !(values[1] > COLLINEAR_RATIO * values[0]) {
            return Err(EstimatorError::CollinearPoints);
        }
        let used = if values[2] < PLANAR_RATIO * values[0] { 2 } else { 3 };
        let axes = order[..used]
            .iter()
            .zip(&values)
            .map(|(&i, &v)| eig.eigenvectors.column(i).into_owned() * v.sqrt())
            .collect();
        Ok(Self { centroid, axes })
    }

    fn count(&self) -> usize {
        self.axes.len() + 1
    }

    fn point(&self, i: usize) -> Vector3<f64> {
        if i == 0 {
            self.centroid
        } else {
            self.centroid + self.axes[i - 1]
        }
    }

    /// Weights `a` with `Σ a = 1` and `Σ a_j c_j = p`.
    fn barycentric(&self, p: &Vector3<f64>) -> Vec<f64> {
        let d = p - self.centroid;
        let mut a = vec![0.0; self.count()];
        for (k, axis) in self.axes.iter().enumerate() {
            a[k + 1] = axis.dot(&d) / axis.norm_squared();
        }
        a[0] = 1.0 - a[1..].iter().sum::<f64>();
        a
    }

    fn pairs(&self) -> Vec<(usize, usize)> {
        let c = self.count();
        (0..c)
            .flat_map(|a| (a + 1..c).map(move |b| (a, b)))
            .collect()
    }
}

/// Kernel vectors of `MᵀM` ordered by increasing eigenvalue, one per control point.
struct Kernel {
    vectors: Vec<DVector<f64>>,
}

impl Kernel {
    fn control(&self, k: usize, j: usize) -> Vector3<f64> {
        Vector3::new(
            self.vectors[k][3 * j],
            self.vectors[k][3 * j + 1],
            self.vectors[k][3 * j + 2],
        )
    }

    /// `d_k · d_l` for control-point pair `(a, b)`, `d_k = v_k[a] - v_k[b]`.
    fn dot(&self, k: usize, l: usize, (a, b): (usize, usize)) -> f64 {
        let dk = self.control(k, a) - self.control(k, b);
        let dl = self.control(l, a) - self.control(l, b);
        dk.dot(&dl)
    }
}

fn null_space(
    corrs: &[Correspondence2D3D],
    alphas: &[Vec<f64>],
    cam: &PinholeCamera,
    controls: usize,
) -> Kernel {
    let dim = 3 * controls;
    let mut mtm = DMatrix::<f64>::zeros(dim, dim);
    let mut row_u = DVector::<f64>::zeros(dim);
    let mut row_v = DVector::<f64>::zeros(dim);
    for (c, a) in corrs.iter().zip(alphas) {
        let xn = cam.normalize(&c.image);
        row_u.fill(0.0);
        row_v.fill(0.0);
        for (j, &aj) in a.iter().enumerate() {
            row_u[3 * j] = aj;
            row_u[3 * j + 2] = -aj * xn.x;
            row_v[3 * j + 1] = aj;
            row_v[3 * j + 2] = -aj * xn.y;
        }
        mtm += &row_u * row_u.transpose() + &row_v * row_v.transpose();
    }
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vectors = order[..controls]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();
    Kernel { vectors }
}

/// Linearized beta estimate using the first `n` kernel vectors.
fn linearized_betas(kernel: &Kernel, controls: &ControlPoints, n: usize) -> Option<Vec<f64>> {
    let pairs = controls.pairs();
    let unknowns: Vec<(usize, usize)> = (0..n).flat_map(|k| (k..n).map(move |l| (k, l))).collect();
    if n > kernel.vectors.len() || unknowns.len() > pairs.len() {
        return None;
    }
    let mut l = DMatrix::<f64>::zeros(pairs.len(), unknowns.len());
    let mut rho = DVector::<f64>::zeros(pairs.len());
    for (r, &pair) in pairs.iter().enumerate() {
        rho[r] = (controls.point(pair.0) - controls.point(pair.1)).norm_squared();
        for (c, &(k, m)) in unknowns.iter().enumerate() {
            let factor = if k == m { 1.0 } else { 2.0 };
            l[(r, c)] = factor * kernel.dot(k, m, pair);
        }
    }
    let b = l.svd(true, true).solve(&rho, 1e-14).ok()?;
    // b is ordered (0,0), (0,1), ..., so b[0..n] = β0·β_l.
    let b00 = b[0];
    let beta0 = b00.abs().sqrt();
    if !(beta0 > 0.0) {
        return None;
    }
    let sign = if b00 < 0.0 { -1.0 } else { 1.0 };
    let mut betas = vec![0.0; kernel.vectors.len()];
    betas[0] = beta0;
    for m in 1..n {
        betas[m] = sign * b[m] / beta0;
    }
    Some(betas)
}

/// Gauss-Newton on `Σ_kl β_k β_l d_k·d_l = ρ` over all kernel coefficients.
fn refine_betas(kernel: &Kernel, controls: &ControlPoints, mut betas: Vec<f64>) -> Vec<f64> {
    let pairs = controls.pairs();
    let nk = betas.len();
    let rho: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| (controls.point(a) - controls.point(b)).norm_squared())
        .collect();
    let gram: Vec<Vec<Vec<f64>>> = pairs
        .iter()
        .map(|&p| {
            (0..nk)
                .map(|k| (0..nk).map(|l| kernel.dot(k, l, p)).collect())
                .collect()
        })
        .collect();
    let cost = |b: &[f64]| -> f64 {
        gram.iter()
            .zip(&rho)
            .map(|(g, r)| {
                let mut s = -r;
                for k in 0..nk {
                    for l in 0..nk {
                        s += b[k] * b[l] * g[k][l];
                    }
                }
                s * s
            })
            .sum()
    };
    for _ in 0..BETA_GN_ITERATIONS {
        let mut jac = DMatrix::<f64>::zeros(pairs.len(), nk);
        let mut res = DVector::<f64>::zeros(pairs.len());
        for (r, g) in gram.iter().enumerate() {
            let mut s = -rho[r];
            for k in 0..nk {
                let mut dk = 0.0;
                for l in 0..nk {
                    s += betas[k] * betas[l] * g[k][l];
                    dk += 2.0 * betas[l] * g[k][l];
                }
                jac[(r, k)] = dk;
            }
            res[r] = s;
        }
        let Ok(step) = jac.svd(true, true).solve(&(-res), 1e-14) else {
            break;
        };
        let next: Vec<f64> = betas.iter().zip(step.iter()).map(|(b, s)| b + s).collect();
        if cost(&next) < cost(&betas) {
            betas = next;
        } else {
            break;
        }
    }
    betas
}

fn pose_from_betas(
    kernel: &Kernel,
    betas: &[f64],
    alphas: &[Vec<f64>],
    corrs: &[Correspondence2D3D],
) -> Option<RigidTransform> {
    let controls = alphas[0].len();
    let ccs: Vec<Vector3<f64>> = (0..controls)
        .map(|j| {
            betas
                .iter()
                .enumerate()
                .map(|(k, b)| kernel.control(k, j) * *b)
                .sum()
        })
        .collect();
    let mut pcs: Vec<Vector3<f64>> = alphas
        .iter()
        .map(|a| a.iter().zip(&ccs).map(|(w, c)| c * *w).sum())
        .collect();
    if pcs.iter().map(|p| p.z).sum::<f64>() < 0.0 {
        pcs.iter_mut().for_each(|p| *p = -*p);
    }
    if pcs.iter().any(|p| !(p.z > 0.0)) {
        return None;
    }
    let objects: Vec<Vector3<f64>> = corrs.iter().map(|c| c.object).collect();
    kabsch_umeyama(&objects, &pcs, None).ok()
}

/// Gauss-Newton on pixel reprojection error; a step is rejected if it raises the RMS.
fn polish_pose(
    mut pose: RigidTransform,
    mut rms: f64,
    corrs: &[Correspondence2D3D],
    cam: &PinholeCamera,
) -> RigidTransform {
    for _ in 0..POSE_GN_ITERATIONS {
        let r = pose.rotation_matrix();
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for c in corrs {
            let pc = pose.transform_point(&c.object);
            let Ok(uv) = cam.project(&pc) else {
                return pose;
            };
            let res: Vector2<f64> = uv - c.image;
            let jp = cam.project_jacobian(&pc);
            // Right perturbation: d pc / d(ω, v) = [-R [p]×, R].
            let rot = jp * (-r * skew(&c.object));
            let tr = jp * r;
            let mut j = nalgebra::Matrix2x6::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&rot);
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&tr);
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        let Some(chol) = jtj.cholesky() else {
            break;
        };
        let step = chol.solve(&(-jtr));
        let candidate = pose.retract(&Twist::from_slice(step.as_slice()));
        match reprojection_rms(&candidate, corrs, cam) {
            Ok(next) if next <= rms * (1.0 + 1e-12) => {
                pose = candidate;
                rms = next.min(rms);
                if step.norm() < 1e-13 {
                    break;
                }
            }
            _ => break,
        }
    }
    pose
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    fn cam() -> PinholeCamera {
        PinholeCamera::new(800.0, 800.0, 320.0, 256.0, 640, 512)
    }

    fn random_pose(rng: &mut impl Rng) -> RigidTransform {
        RigidTransform::new(
            UnitQuaternion::from_euler_angles(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0)),
            Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(80.0..150.0)),
        )
    }

    fn synth(pose: &RigidTransform, objects: &[Vector3<f64>]) -> Vec<Correspondence2D3D> {
        objects
            .iter()
            .enumerate()
            .map(|(i, o)| Correspondence2D3D::new(format!("k{i}"), cam().project(&pose.transform_point(o)).unwrap(), *o))
            .collect()
    }

    fn random_objects(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)))
            .collect()
    }

    #[test]
    fn noiseless_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let objects = random_objects(&mut rng, 6);
            let est = solve_epnp(&synth(&pose, &objects), &cam()).unwrap();
            assert!(est.rotation_distance(&pose) < 1e-4);
            assert!(est.translation_distance(&pose) < 1e-3);
        }
    }

    #[test]
    fn planar_objects_use_three_control_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(32);
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let objects: Vec<_> = random_objects(&mut rng, 6).into_iter().map(|p| Vector3::new(p.x, p.y, 0.0)).collect();
            let est = solve_epnp(&synth(&pose, &objects), &cam()).unwrap();
            assert!(est.rotation_distance(&pose) < 1e-4);
            assert!(est.translation_distance(&pose) < 1e-3);
        }
    }

    #[test]
    fn identity_pose_on_a_plane() {
        let objects = [
            Vector3::new(-10.0, -10.0, 100.0),
            Vector3::new(10.0, -10.0, 100.0),
            Vector3::new(10.0, 10.0, 100.0),
            Vector3::new(-10.0, 10.0, 100.0),
            Vector3::new(3.0, -2.0, 100.0),
        ];
        let est = solve_epnp(&synth(&RigidTransform::identity(), &objects), &cam()).unwrap();
        assert!(est.rotation_distance(&RigidTransform::identity()) < 1e-6);
        assert!(est.translation().norm() < 1e-4);
    }

    #[test]
    fn error_cases() {
        let objects: Vec<_> = (0..3).map(|i| Vector3::new(i as f64, 1.0, 100.0)).collect();
        let corrs = synth(&RigidTransform::identity(), &objects);
        assert!(matches!(solve_epnp(&corrs, &cam()), Err(EstimatorError::InsufficientPoints { .. })));

        let objects: Vec<_> = (0..6).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 100.0)).collect();
        let corrs = synth(&RigidTransform::identity(), &objects);
        assert_eq!(solve_epnp(&corrs, &cam()), Err(EstimatorError::CollinearPoints));
    }

    #[test]
    fn noisy_monte_carlo() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut rot_err = Vec::new();
        let mut trans_err = Vec::new();
        for _ in 0..100 {
            let mut pose = random_pose(&mut rng);
            pose = RigidTransform::new(*pose.rotation(), Vector3::new(pose.translation().x, pose.translation().y, 100.0));
            let objects = random_objects(&mut rng, 6);
            let mut corrs = synth(&pose, &objects);
            for c in &mut corrs {
                c.image += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
            let est = solve_epnp(&corrs, &cam()).unwrap();
            let epnp_rms = reprojection_rms(&est, &corrs, &cam()).unwrap();
            assert!(epnp_rms < 5.0);
            rot_err.push(est.rotation_distance(&pose).to_degrees());
            trans_err.push(est.translation_distance(&pose));
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(f64::total_cmp);
            (v[49] + v[50]) / 2.0
        };
        assert!(median(&mut rot_err) < 2.0);
        assert!(median(&mut trans_err) < 3.0);
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(34);
        let noise = Normal::new(0.0, 0.5).unwrap();
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let mut corrs = synth(&pose, &random_objects(&mut rng, 8));
            for c in &mut corrs {
                c.image += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
            let a = solve_epnp(&corrs, &cam()).unwrap();
            corrs.reverse();
            corrs.swap(0, 3);
            let b = solve_epnp(&corrs, &cam()).unwrap();
            let diff = (a.to_matrix() - b.to_matrix()).abs().max();
            assert!(diff < 1e-9, "diff {diff}");
        }
    }
}
