use std::f64::consts::FRAC_PI_2;

use nalgebra::{SMatrix, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{keypoint_residuals, rcm_residual, retract_pose, Residuals, StateVector};
use super::{Descent, FrameObservation, KeypointLossKind, LossWeights, OptimConfig, OptimError};
use crate::estimators::{estimate_rcm_robust, RcmEstimate};
use crate::kinematics::{shaft_line, InstrumentModel, InstrumentPose};

const ARMIJO_C: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 50;
const INITIAL_DAMPING: f64 = 1.0;
const MIN_DAMPING: f64 = 1e-9;
const MAX_DAMPING: f64 = 1e9;
const DAMPING_DOWN: f64 = 1.0 / 3.0;
const DAMPING_UP: f64 = 4.0;
const MIN_KEYPOINTS: usize = 4;

/// Per-frame objective `λ_kpt·L_kpt [+ λ_rcm·‖(I - x xᵀ)(p - o)‖²]`.
#[derive(Debug, Clone, Copy)]
pub struct FrameProblem<'a> {
    pub model: &'a InstrumentModel,
    pub obs: &'a FrameObservation,
    pub kind: KeypointLossKind,
    pub weights: LossWeights,
    pub rcm: Option<Vector3<f64>>,
    /// When false, the articulation `(α, θl, θr)` is held fixed.
    pub free_articulation: bool,
}

impl FrameProblem<'_> {
    pub fn residuals(&self, pose: &InstrumentPose) -> Result<Residuals, OptimError> {
        let kpt = keypoint_residuals(pose, self.model, self.obs, self.kind)?;
        let s = self.weights.kpt.sqrt();
        let mut res = Residuals {
            values: kpt.values.iter().map(|r| r * s).collect(),
            rows: kpt.rows.iter().map(|row| row * s).collect(),
        };
        if let Some(p) = self.rcm.filter(|_| self.weights.rcm > 0.0) {
            let (r, j) = rcm_residual(pose, &p);
            res.push_scaled3(r, &j, self.weights.rcm.sqrt());
        }
        if !self.free_articulation {
            for row in &mut res.rows {
                row.fixed_rows_mut::<3>(6).fill(0.0);
            }
        }
        Ok(res)
    }

    pub fn loss(&self, pose: &InstrumentPose) -> Result<f64, OptimError> {
        Ok(self.residuals(pose)?.cost())
    }
}

/// Clamps articulation angles to `[-π/2, π/2]` and merges crossed jaws at their mean.
pub fn project_articulation(mut pose: InstrumentPose) -> InstrumentPose {
    let clamp = |a: f64| a.clamp(-FRAC_PI_2, FRAC_PI_2);
    pose.wrist_pitch = clamp(pose.wrist_pitch);
    pose.jaw_left = clamp(pose.jaw_left);
    pose.jaw_right = clamp(pose.jaw_right);
    if pose.jaw_left < pose.jaw_right {
        let mid = pose.jaw_bisector();
        pose.jaw_left = mid;
        pose.jaw_right = mid;
    }
    pose
}

fn direction(
    res: &Residuals,
    gradient: &StateVector,
    descent: Descent,
    damping: f64,
) -> (StateVector, f64) {
    match descent {
        Descent::Gradient => (-gradient, 1e-2),
        Descent::GaussNewton => {
            let (mut a, jtr) = res.normal_equations();
            let scale = a.diagonal().max().max(f64::MIN_POSITIVE);
            for k in 0..a.nrows() {
                a[(k, k)] += damping * a[(k, k)] + 1e-12 * scale;
            }
            let dir = SMatrix::cholesky(a)
                .map(|c| c.solve(&(-jtr)))
                .unwrap_or(-gradient);
            (dir, 1.0)
        }
    }
}

/// One backtracking line-search step. Returns `None` when no strictly decreasing step
/// was found. The Marquardt damping shrinks after a full step and grows otherwise.
fn descent_step(
    problem: &FrameProblem,
    pose: &InstrumentPose,
    descent: Descent,
    damping: &mut f64,
) -> Result<Option<(InstrumentPose, f64)>, OptimError> {
    let res = problem.residuals(pose)?;
    let cost = res.cost();
    let gradient = res.gradient();
    if !(gradient.norm() > 0.0) {
        return Ok(None);
    }
    let (mut dir, mut t) = direction(&res, &gradient, descent, *damping);
    let full = t;
    let mut slope = gradient.dot(&dir);
    if !(slope < 0.0) {
        dir = -gradient;
        slope = -gradient.norm_squared();
    }
    for _ in 0..MAX_BACKTRACKS {
        let candidate = project_articulation(retract_pose(pose, &(dir * t)));
        if let Ok(next) = problem.loss(&candidate) {
            if next < cost && next <= cost + ARMIJO_C * t * slope {
                *damping = if t == full {
                    (*damping * DAMPING_DOWN).max(MIN_DAMPING)
                } else {
                    (*damping * DAMPING_UP).min(MAX_DAMPING)
                };
                return Ok(Some((candidate, next)));
            }
        }
        t *= SHRINK;
    }
    *damping = (*damping * DAMPING_UP).min(MAX_DAMPING);
    Ok(None)
}

struct FrameRun {
    pose: InstrumentPose,
    loss: f64,
    iterations: usize,
    history: Vec<f64>,
}

/// Iterates descent steps until `max_iterations`, or `patience` consecutive
/// iterations without meaningful improvement.
fn refine_frame(
    problem: &FrameProblem,
    mut pose: InstrumentPose,
    max_iterations: usize,
    patience: usize,
    descent: Descent,
) -> Result<FrameRun, OptimError> {
    let mut loss = problem.loss(&pose)?;
    let mut history = vec![loss];
    let mut stalled = 0;
    let mut iterations = 0;
    let mut damping = INITIAL_DAMPING;
    while iterations < max_iterations && stalled < patience {
        iterations += 1;
        match descent_step(problem, &pose, descent, &mut damping)? {
            Some((next_pose, next_loss)) => {
                let improved = loss - next_loss > 1e-12 * (1.0 + loss);
                pose = next_pose;
                loss = next_loss;
                history.push(loss);
                stalled = if improved { 0 } else { stalled + 1 };
            }
            None => stalled += 1,
        }
    }
    Ok(FrameRun {
        pose,
        loss,
        iterations,
        history,
    })
}

fn map_frames<T, F>(n: usize, parallel: bool, f: F) -> Result<Vec<T>, OptimError>
where
    T: Send,
    F: Fn(usize) -> Result<T, OptimError> + Sync + Send,
{
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// Diagnostics of one optimization phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct OptimizationReport {
    pub final_losses: Vec<f64>,
    pub iterations: Vec<usize>,
    /// Per-frame objective after every accepted step, starting with the initial value.
    pub loss_histories: Vec<Vec<f64>>,
    /// RCM point after each epoch (phase 1) or the frozen point (phase 2).
    pub rcm_trajectory: Vec<Vector3<f64>>,
    /// Inlier mask after each epoch; empty for phase 2.
    pub inlier_masks: Vec<Vec<bool>>,
    /// Final shaft-line-to-RCM perpendicular distance per frame, mm.
    pub rcm_distances: Vec<f64>,
    pub mean_rcm_distance: f64,
}

pub fn mean_rcm_distance(poses: &[InstrumentPose], p_rcm: &Vector3<f64>) -> f64 {
    crate::stats::mean(&rcm_distances(poses, p_rcm))
}

fn rcm_distances(poses: &[InstrumentPose], p_rcm: &Vector3<f64>) -> Vec<f64> {
    poses
        .iter()
        .map(|p| shaft_line(p).distance_to(p_rcm))
        .collect()
}

fn check_inputs(
    frames: &[FrameObservation],
    poses: &[InstrumentPose],
    config: &OptimConfig,
) -> Result<(), OptimError> {
    config.validate()?;
    if frames.len() != poses.len() {
        return Err(OptimError::LengthMismatch {
            frames: frames.len(),
            poses: poses.len(),
        });
    }
    for (i, f) in frames.iter().enumerate() {
        if f.keypoints.len() < MIN_KEYPOINTS {
            return Err(OptimError::TooFewKeypoints {
                frame: i,
                got: f.keypoints.len(),
            });
        }
    }
    Ok(())
}

/// Epoch-wise keypoint refinement with robust RCM re-estimation after each epoch.
pub fn optimize_phase1(
    frames: &[FrameObservation],
    init: &[InstrumentPose],
    model: &InstrumentModel,
    config: &OptimConfig,
) -> Result<(Vec<InstrumentPose>, RcmEstimate, OptimizationReport), OptimError> {
    check_inputs(frames, init, config)?;
    if frames.len() < 2 {
        return Err(OptimError::InsufficientFrames {
            needed: 2,
            got: frames.len(),
        });
    }
    let problem = |i: usize| FrameProblem {
        model,
        obs: &frames[i],
        kind: config.keypoint_loss,
        weights: config.weights,
        rcm: None,
        free_articulation: config.phase1_articulation,
    };
    let mut poses = init.to_vec();
    let mut report = OptimizationReport {
        iterations: vec![0; frames.len()],
        loss_histories: vec![Vec::new(); frames.len()],
        ..Default::default()
    };
    let mut estimate = None;
    for _ in 0..config.epochs {
        let runs = map_frames(frames.len(), config.parallel, |i| {
            refine_frame(&problem(i), poses[i], config.steps_per_epoch, config.patience, config.descent)
        })?;
        for (i, run) in runs.into_iter().enumerate() {
            poses[i] = run.pose;
            report.iterations[i] += run.iterations;
            let history = &mut report.loss_histories[i];
            let skip = usize::from(!history.is_empty());
            history.extend(run.history.into_iter().skip(skip));
        }
        let lines: Vec<_> = poses.iter().map(shaft_line).collect();
        let est = estimate_rcm_robust(&lines, config.rcm_threshold, config.rcm_max_rounds)?;
        report.rcm_trajectory.push(est.point);
        report.inlier_masks.push(est.inliers.clone());
        estimate = Some(est);
    }
    let estimate = estimate.expect("at least one epoch");
    report.final_losses = report
        .loss_histories
        .iter()
        .map(|h| *h.last().expect("history holds the initial loss"))
        .collect();
    report.rcm_distances = rcm_distances(&poses, &estimate.point);
    report.mean_rcm_distance = crate::stats::mean(&report.rcm_distances);
    Ok((poses, estimate, report))
}

/// Independent per-frame refinement against keypoints and the frozen RCM point.
pub fn optimize_phase2(
    frames: &[FrameObservation],
    poses: &[InstrumentPose],
    p_rcm: &Vector3<f64>,
    model: &InstrumentModel,
    config: &OptimConfig,
) -> Result<(Vec<InstrumentPose>, OptimizationReport), OptimError> {
    check_inputs(frames, poses, config)?;
    let runs = map_frames(frames.len(), config.parallel, |i| {
        let problem = FrameProblem {
            model,
            obs: &frames[i],
            kind: config.keypoint_loss,
            weights: config.weights,
            rcm: Some(*p_rcm),
            free_articulation: config.phase2_articulation,
        };
        refine_frame(
            &problem,
            poses[i],
            config.max_iterations,
            config.patience,
            config.descent,
        )
    })?;
    let refined: Vec<InstrumentPose> = runs.iter().map(|r| r.pose).collect();
    let rcm_distances = rcm_distances(&refined, p_rcm);
    let report = OptimizationReport {
        final_losses: runs.iter().map(|r| r.loss).collect(),
        iterations: runs.iter().map(|r| r.iterations).collect(),
        loss_histories: runs.into_iter().map(|r| r.history).collect(),
        rcm_trajectory: vec![*p_rcm],
        inlier_masks: Vec::new(),
        mean_rcm_distance: crate::stats::mean(&rcm_distances),
        rcm_distances,
    };
    Ok((refined, report))
}
