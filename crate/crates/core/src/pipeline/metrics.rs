//! Tool-tip error metrics and their CSV form.

use std::fmt::Write as _;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::format::SequenceFrame;
use crate::camera::{px_to_mm_scale, triangulate, PinholeCamera, StereoRig};
use crate::geom::RigidTransform;
use crate::kinematics::InstrumentModel;
use crate::stats::{mean, median};

/// Errors for one frame. Values are NaN when the frame had no usable ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub err2d_px: f64,
    pub err2d_mm: f64,
    pub err3d_mm: f64,
    /// Scale used for `err2d_mm`, mm per px.
    pub scale_mm_per_px: f64,
    pub included: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub err2d_px: f64,
    pub err2d_mm: f64,
    pub err3d_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub frames: Vec<FrameMetrics>,
    pub average: Summary,
    pub median: Summary,
    pub included_count: usize,
    /// Frames skipped for lack of a tip observation.
    pub missing_count: usize,
}

struct TipTruth {
    point: Vector3<f64>,
    pixel: Vector2<f64>,
}

fn tip_truth(frame: &SequenceFrame, camera: &PinholeCamera, rig: Option<&StereoRig>) -> Option<TipTruth> {
    let gt = frame.gt.as_ref()?;
    let point = match (gt.tip_3d, rig, gt.tip_2d_left, gt.tip_2d_right) {
        (Some(p), ..) => p,
        (None, Some(rig), Some(l), Some(r)) => triangulate(rig, &l, &r).ok()?,
        _ => return None,
    };
    let pixel = match gt.tip_2d_left {
        Some(px) => px,
        None => camera.project(&point).ok()?,
    };
    Some(TipTruth { point, pixel })
}

fn frame_metrics(
    index: usize,
    frame: &SequenceFrame,
    hand_eye: &RigidTransform,
    model: &InstrumentModel,
    camera: &PinholeCamera,
    rig: Option<&StereoRig>,
) -> FrameMetrics {
    let missing = FrameMetrics {
        frame: index,
        err2d_px: f64::NAN,
        err2d_mm: f64::NAN,
        err3d_mm: f64::NAN,
        scale_mm_per_px: f64::NAN,
        included: false,
    };
    let Some(truth) = tip_truth(frame, camera, rig) else {
        return missing;
    };
    let corrected = hand_eye.compose(&frame.reported_base_from_ee);
    let tip = corrected.transform_point(&model.tool_tip_in_ee());
    let (Ok(uv), Ok(scale)) = (camera.project(&tip), px_to_mm_scale(camera, truth.point.z)) else {
        return missing;
    };
    let err2d_px = (uv - truth.pixel).norm();
    FrameMetrics {
        frame: index,
        err2d_px,
        err2d_mm: err2d_px * scale,
        err3d_mm: (tip - truth.point).norm(),
        scale_mm_per_px: scale,
        included: true,
    }
}

/// Tool-tip errors of `hand_eye · reported_rbT_ee` against each frame's ground truth.
///
/// The reference tip is `gt.tip_3d` when present, otherwise the stereo triangulation of
/// `gt.tip_2d_left` / `gt.tip_2d_right`. Pixel errors are measured in `camera` and
/// converted to mm with `Z / fx` at the reference tip depth.
pub fn evaluate(
    hand_eye: &RigidTransform,
    frames: &[SequenceFrame],
    model: &InstrumentModel,
    camera: &PinholeCamera,
    rig: Option<&StereoRig>,
) -> MetricsReport {
    let rows: Vec<FrameMetrics> = frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| frame_metrics(i, f, hand_eye, model, camera, rig))
        .collect();
    let pick = |f: fn(&FrameMetrics) -> f64| -> Vec<f64> {
        rows.iter().filter(|r| r.included).map(f).collect()
    };
    let (px, mm, d3) = (
        pick(|r| r.err2d_px),
        pick(|r| r.err2d_mm),
        pick(|r| r.err3d_mm),
    );
    let included_count = px.len();
    MetricsReport {
        schema_version: crate::SCHEMA_VERSION,
        missing_count: rows.len() - included_count,
        average: Summary {
            err2d_px: mean(&px),
            err2d_mm: mean(&mm),
            err3d_mm: mean(&d3),
        },
        median: Summary {
            err2d_px: median(&px),
            err2d_mm: median(&mm),
            err3d_mm: median(&d3),
        },
        included_count,
        frames: rows,
    }
}

/// `%.9g`-style formatting: 9 significant digits, trailing zeros trimmed, exponent
/// form outside `[1e-5, 1e9)`.
pub fn format_sig9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa.into()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

impl MetricsReport {
    /// CSV with columns `frame,err2d_px,err2d_mm,err3d_mm,included_flag`, one row per
    /// frame followed by `avg` and `median` rows whose flag column holds the number of
    /// included frames.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,err2d_px,err2d_mm,err3d_mm,included_flag\n");
        for r in &self.frames {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.frame,
                format_sig9(r.err2d_px),
                format_sig9(r.err2d_mm),
                format_sig9(r.err3d_mm),
                u8::from(r.included)
            );
        }
        for (name, s) in [("avg", &self.average), ("median", &self.median)] {
            let _ = writeln!(
                out,
                "{name},{},{},{},{}",
                format_sig9(s.err2d_px),
                format_sig9(s.err2d_mm),
                format_sig9(s.err3d_mm),
                self.included_count
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialization cannot fail")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::format::FrameTruth;
    use crate::kinematics::JointState;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(12.24), "12.24");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(2.0 / 3.0 * 1000.0), "666.666667");
        assert_eq!(format_sig9(123456789.4), "123456789");
        assert_eq!(format_sig9(1234567894.0), "1.23456789e+09");
        assert_eq!(format_sig9(-1.5e-7), "-1.5e-07");
        assert_eq!(format_sig9(0.0001), "0.0001");
        assert_eq!(format_sig9(f64::NAN), "nan");
        assert_eq!(format_sig9(9.999999999), "10");
    }

    fn frame_with_tip(tip: Vector3<f64>, cam: &PinholeCamera) -> SequenceFrame {
        SequenceFrame {
            t: 0.0,
            keypoints_2d: Vec::new(),
            joints: JointState::default(),
            reported_base_from_ee: RigidTransform::identity(),
            gt: Some(FrameTruth {
                tip_3d: Some(tip),
                tip_2d_left: Some(cam.project(&tip).unwrap()),
                ..Default::default()
            }),
        }
    }

    #[test]
    fn lateral_offset_oracle() {
        // Tip sits at the ee origin offset along x by the gripper length; a 5 mm lateral
        // offset at depth 100 and fx 1000 is 50 px.
        let cam = PinholeCamera::new(1000.0, 1000.0, 320.0, 240.0, 640, 480);
        let model = InstrumentModel::default();
        let truth = Vector3::new(0.0, 0.0, 100.0);
        let hand_eye = RigidTransform::from_translation(
            truth + Vector3::new(5.0, 0.0, 0.0) - model.tool_tip_in_ee(),
        );
        let report = evaluate(&hand_eye, &[frame_with_tip(truth, &cam)], &model, &cam, None);
        let r = report.frames[0];
        assert_abs_diff_eq!(r.err2d_px, 50.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.err3d_mm, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.err2d_mm, 5.0, epsilon = 1e-9);
    }

    #[test]
    fn missing_truth_is_counted() {
        let cam = PinholeCamera::new(1000.0, 1000.0, 320.0, 240.0, 640, 480);
        let model = InstrumentModel::default();
        let mut f = frame_with_tip(Vector3::new(0.0, 0.0, 100.0), &cam);
        f.gt = None;
        let report = evaluate(&RigidTransform::identity(), &[f], &model, &cam, None);
        assert_eq!(report.missing_count, 1);
        assert_eq!(report.included_count, 0);
        assert!(!report.frames[0].included);
        let csv = report.to_csv();
        assert!(csv.lines().nth(1).unwrap().ends_with(",0"));
    }

    #[test]
    fn csv_layout() {
        let cam = PinholeCamera::new(1000.0, 1000.0, 320.0, 240.0, 640, 480);
        let model = InstrumentModel::default();
        let frames: Vec<_> = (0..3)
            .map(|k| frame_with_tip(Vector3::new(k as f64, 0.0, 100.0), &cam))
            .collect();
        let report = evaluate(&RigidTransform::from_translation(Vector3::new(1.0, 0.0, 100.0)), &frames, &model, &cam, None);
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.split('\n').collect();
        assert_eq!(lines[0], "frame,err2d_px,err2d_mm,err3d_mm,included_flag");
        assert_eq!(lines.len(), 1 + 3 + 2 + 1);
        assert!(lines[4].starts_with("avg,"));
        assert!(lines[5].starts_with("median,"));
        assert_eq!(lines[6], "");
        assert!(!csv.contains('\r'));
    }
}
