use nalgebra::{UnitQuaternion, Vector3};
use rcmcal_core::geom::RigidTransform;
use rcmcal_core::kinematics::{shaft_line, InstrumentPose};
use rcmcal_core::optim::{
    optimize_phase1, optimize_phase2, Descent, FrameObservation, OptimConfig,
};
use rcmcal_core::{generate_sequence, ScenarioConfig, SyntheticFrame};

fn scenario(n: usize, seed: u64) -> (ScenarioConfig, Vec<SyntheticFrame>) {
    let cfg = ScenarioConfig::noiseless(n, seed);
    let frames = generate_sequence(&cfg).unwrap();
    (cfg, frames)
}

fn observations(frames: &[SyntheticFrame]) -> Vec<FrameObservation> {
    frames.iter().map(|f| f.observation.clone()).collect()
}

fn truth(frames: &[SyntheticFrame]) -> Vec<InstrumentPose> {
    frames.iter().map(|f| f.true_pose).collect()
}

fn keypoint_rms(loss: f64) -> f64 {
    (loss / 2.0).sqrt()
}

fn perturb(pose: &InstrumentPose, k: usize) -> InstrumentPose {
    let axis = Vector3::new(1.0, (k as f64).sin(), (k as f64).cos()).normalize();
    let dir = Vector3::new((k as f64 * 0.7).cos(), (k as f64 * 0.7).sin(), 0.5).normalize();
    let delta = RigidTransform::new(
        UnitQuaternion::from_scaled_axis(axis * 2f64.to_radians()),
        dir * 3.0,
    );
    InstrumentPose {
        shaft: pose.shaft.compose(&delta),
        ..*pose
    }
}

fn max_pose_change(a: &[InstrumentPose], b: &[InstrumentPose]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| {
            p.shaft
                .rotation_distance(&q.shaft)
                .max(p.shaft.translation_distance(&q.shaft))
                .max((p.wrist_pitch - q.wrist_pitch).abs())
                .max((p.jaw_left - q.jaw_left).abs())
                .max((p.jaw_right - q.jaw_right).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn phase1_ground_truth_is_a_fixed_point() {
    let (cfg, frames) = scenario(12, 1);
    let init = truth(&frames);
    for articulation in [false, true] {
        let config = OptimConfig {
            phase1_articulation: articulation,
            ..OptimConfig::default()
        };
        let (poses, rcm, report) =
            optimize_phase1(&observations(&frames), &init, &cfg.model, &config).unwrap();
        assert!(max_pose_change(&poses, &init) < 1e-6);
        assert!((rcm.point - cfg.rcm_point()).norm() < 1e-6);
        assert_eq!(report.rcm_trajectory.len(), config.epochs);
        assert_eq!(report.inlier_masks.len(), config.epochs);
    }
}

#[test]
fn phase1_converges_from_perturbed_start() {
    let (cfg, frames) = scenario(15, 2);
    let init: Vec<_> = truth(&frames)
        .iter()
        .enumerate()
        .map(|(k, p)| perturb(p, k))
        .collect();
    for articulation in [false, true] {
        let config = OptimConfig {
            epochs: 10,
            phase1_articulation: articulation,
            ..OptimConfig::default()
        };
        let (_, rcm, report) =
            optimize_phase1(&observations(&frames), &init, &cfg.model, &config).unwrap();
        for loss in &report.final_losses {
            assert!(keypoint_rms(*loss) < 0.1, "rms {}", keypoint_rms(*loss));
        }
        assert!((rcm.point - cfg.rcm_point()).norm() < 1e-3);
    }
}

#[test]
fn phase1_with_two_frames_is_low_confidence() {
    let (cfg, frames) = scenario(3, 3);
    let two = &frames[..2];
    let (_, rcm, _) =
        optimize_phase1(&observations(two), &truth(two), &cfg.model, &OptimConfig::default())
            .unwrap();
    assert!(rcm.low_confidence);
}

#[test]
fn phase2_fixed_point_stops_after_patience() {
    let (cfg, frames) = scenario(8, 4);
    let init = truth(&frames);
    let config = OptimConfig::default();
    let (poses, report) = optimize_phase2(
        &observations(&frames),
        &init,
        &cfg.rcm_point(),
        &cfg.model,
        &config,
    )
    .unwrap();
    assert!(max_pose_change(&poses, &init) < 1e-6);
    assert!(report.iterations.iter().all(|&i| i == config.patience));
}

#[test]
fn phase2_pulls_shaft_onto_rcm() {
    let (cfg, frames) = scenario(6, 5);
    let p_rcm = cfg.rcm_point();
    let init: Vec<InstrumentPose> = frames
        .iter()
        .map(|f| {
            // Shift the shaft 5 mm perpendicular to its axis.
            let line = shaft_line(&f.true_pose);
            let side = line.direction().cross(&Vector3::z()).normalize() * 5.0;
            InstrumentPose {
                shaft: RigidTransform::from_translation(side).compose(&f.true_pose.shaft),
                ..f.true_pose
            }
        })
        .collect();
    for p in &init {
        assert!((shaft_line(p).distance_to(&p_rcm) - 5.0).abs() < 1e-9);
    }
    let mut config = OptimConfig::default();
    config.weights.rcm = 1000.0;
    let (poses, report) =
        optimize_phase2(&observations(&frames), &init, &p_rcm, &cfg.model, &config).unwrap();
    for (p, f) in poses.iter().zip(&frames) {
        assert!(shaft_line(p).distance_to(&p_rcm) < 0.5);
        let obs = &f.observation;
        let loss = rcmcal_core::optim::keypoint_loss(p, &cfg.model, obs).unwrap().value;
        assert!(keypoint_rms(loss) < 1.0);
    }
    for h in &report.loss_histories {
        assert!(h.windows(2).all(|w| w[1] < w[0]));
    }
}

fn noisy_setup() -> (ScenarioConfig, Vec<SyntheticFrame>, Vec<InstrumentPose>) {
    let cfg = ScenarioConfig::biased(20, 6);
    let frames = generate_sequence(&cfg).unwrap();
    let init = frames
        .iter()
        .enumerate()
        .map(|(k, f)| perturb(&f.true_pose, k))
        .collect();
    (cfg, frames, init)
}

#[test]
fn phase2_is_frame_order_and_thread_independent() {
    let (cfg, frames, init) = noisy_setup();
    let obs = observations(&frames);
    let p = cfg.rcm_point();
    let config = OptimConfig::default();
    let (forward, _) = optimize_phase2(&obs, &init, &p, &cfg.model, &config).unwrap();

    let rev_obs: Vec<_> = obs.iter().rev().cloned().collect();
    let rev_init: Vec<_> = init.iter().rev().copied().collect();
    let (mut reversed, _) = optimize_phase2(&rev_obs, &rev_init, &p, &cfg.model, &config).unwrap();
    reversed.reverse();
    assert_eq!(forward, reversed);

    let serial = OptimConfig {
        parallel: false,
        ..config
    };
    let (sequential, _) = optimize_phase2(&obs, &init, &p, &cfg.model, &serial).unwrap();
    assert_eq!(forward, sequential);
}

#[test]
fn accepted_steps_strictly_decrease_the_objective() {
    let (cfg, frames, init) = noisy_setup();
    let obs = observations(&frames);
    for descent in [Descent::GaussNewton, Descent::Gradient] {
        let config = OptimConfig {
            descent,
            max_iterations: 50,
            ..OptimConfig::default()
        };
        let (_, r1) = optimize_phase2(&obs, &init, &cfg.rcm_point(), &cfg.model, &config).unwrap();
        let (_, _, r2) = optimize_phase1(&obs, &init, &cfg.model, &config).unwrap();
        for h in r1.loss_histories.iter().chain(&r2.loss_histories) {
            assert!(h.len() > 1);
            assert!(h.windows(2).all(|w| w[1] < w[0]));
        }
    }
}

#[test]
fn phase2_tightens_the_shaft_bundle() {
    let (cfg, frames, init) = noisy_setup();
    let obs = observations(&frames);
    let config = OptimConfig::default();
    let (poses1, rcm, r1) = optimize_phase1(&obs, &init, &cfg.model, &config).unwrap();
    let (_, r2) = optimize_phase2(&obs, &poses1, &rcm.point, &cfg.model, &config).unwrap();
    assert!(r2.mean_rcm_distance < r1.mean_rcm_distance);
}

#[test]
fn invalid_inputs_are_rejected() {
    let (cfg, frames) = scenario(4, 7);
    let obs = observations(&frames);
    let init = truth(&frames);
    let config = OptimConfig::default();
    assert!(optimize_phase1(&obs, &init[..3], &cfg.model, &config).is_err());
    let mut sparse = obs.clone();
    sparse[1].keypoints.truncate(3);
    assert!(optimize_phase1(&sparse, &init, &cfg.model, &config).is_err());
    let mut bad = config.clone();
    bad.weights.silh = 1.0;
    assert!(optimize_phase2(&obs, &init, &cfg.rcm_point(), &cfg.model, &bad).is_err());
    bad = config;
    bad.weights.kpt = 0.0;
    assert!(optimize_phase2(&obs, &init, &cfg.rcm_point(), &cfg.model, &bad).is_err());
}
