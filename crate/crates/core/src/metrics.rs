//! Evaluation metrics: hand joint error, object surface agreement, hand-relative
//! consistency, pose errors and sequence success.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FrameSource, GroundTruth};
use crate::error::{Error, Result};
use crate::geometry::{AnisoScale, RigidPose, Vec3};
use crate::spatial::PointIndex;
use crate::tracker::TrackResult;

pub const EVAL_SAMPLES: usize = 10_000;
pub const F_THRESHOLDS_M: [f64; 2] = [0.005, 0.010];

/// Root-relative mean per-joint position error in millimeters (joint 0 is the root).
pub fn mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (pr, gr) = (pred[0], gt[0]);
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| ((p - pr) - (g - gr)).norm()).sum();
    Ok(sum / pred.len() as f64 * 1000.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChamferResult {
    pub cd_cm2: f64,
    /// F-score in percent for each requested threshold.
    pub f_pct: Vec<f64>,
}

fn nearest_sq(index: &PointIndex, pts: &[Vec3]) -> Vec<f64> {
    pts.iter().map(|p| index.nearest(p).1).collect()
}

/// Symmetric Chamfer distance (sum of both directional means of squared distances, cm²)
/// and F-scores at the given thresholds (meters).
pub fn chamfer_fscore(pred: &[Vec3], gt: &[Vec3], thresholds: &[f64]) -> Result<ChamferResult> {
    let (Some(ip), Some(ig)) = (PointIndex::new(pred), PointIndex::new(gt)) else {
        return Err(Error::EmptyCloud);
    };
    let d_pg = nearest_sq(&ig, pred);
    let d_gp = nearest_sq(&ip, gt);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let cd_cm2 = (mean(&d_pg) + mean(&d_gp)) * 1e4;
    let f_pct = thresholds
        .iter()
        .map(|&t| {
            let t2 = t * t;
            let precision = d_pg.iter().filter(|&&d| d <= t2).count() as f64 / d_pg.len() as f64;
            let recall = d_gp.iter().filter(|&&d| d <= t2).count() as f64 / d_gp.len() as f64;
            if precision + recall == 0.0 {
                0.0
            } else {
                200.0 * precision * recall / (precision + recall)
            }
        })
        .collect();
    Ok(ChamferResult { cd_cm2, f_pct })
}

/// Chamfer distance after expressing each object cloud in its own hand-root frame.
pub fn cd_hand_relative(pred_obj: &[Vec3], gt_obj: &[Vec3], pred_root: &RigidPose, gt_root: &RigidPose) -> Result<f64> {
    let pi = pred_root.inverse();
    let gi = gt_root.inverse();
    let p: Vec<Vec3> = pred_obj.iter().map(|x| pi.transform(x)).collect();
    let g: Vec<Vec3> = gt_obj.iter().map(|x| gi.transform(x)).collect();
    Ok(chamfer_fscore(&p, &g, &[])?.cd_cm2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    pub rot_deg: f64,
    pub trans_mm: f64,
    pub add_mm: f64,
    pub adds_mm: f64,
    pub add_pass: bool,
    pub adds_pass: bool,
}

/// Rotation/translation error and ADD/ADD-S of `model` points (object frame, metric)
/// against a threshold of `diameter_frac` of the model diameter.
pub fn pose_errors(pred: &RigidPose, gt: &RigidPose, model: &[Vec3], diameter: f64, diameter_frac: f64) -> Result<PoseErrors> {
    if model.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: model.len(),
        });
    }
    let pp: Vec<Vec3> = model.iter().map(|x| pred.transform(x)).collect();
    let gp: Vec<Vec3> = model.iter().map(|x| gt.transform(x)).collect();
    let add = pp.iter().zip(&gp).map(|(a, b)| (a - b).norm()).sum::<f64>() / model.len() as f64;
    let index = PointIndex::new(&pp).expect("non-empty");
    let adds = gp.iter().map(|g| index.nearest(g).1.sqrt()).sum::<f64>() / model.len() as f64;
    let thr = diameter_frac * diameter;
    Ok(PoseErrors {
        rot_deg: pred.rotation_angle_to(gt).to_degrees(),
        trans_mm: (pred.translation - gt.translation).norm() * 1000.0,
        add_mm: add * 1000.0,
        adds_mm: adds * 1000.0,
        add_pass: add < thr,
        adds_pass: adds < thr,
    })
}

/// Percentage of sequences without a failure flag.
pub fn success_rate(results: &[TrackResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyInput);
    }
    let ok = results.iter().filter(|r| !r.failure_flag()).count();
    Ok(100.0 * ok as f64 / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub index: usize,
    pub mpjpe_mm: f64,
    pub cd_cm2: f64,
    pub f5_pct: f64,
    pub f10_pct: f64,
    pub cdh_cm2: f64,
    pub rot_err_deg: f64,
    pub trans_err_mm: f64,
    pub add_pass: bool,
    pub adds_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub cd: String,
    pub f_score: String,
    pub mpjpe: String,
    pub cd_h: String,
    pub add: String,
    pub alignment: String,
    pub samples: usize,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            cd: "sum of both directional means of squared nearest-neighbor distances, cm^2".into(),
            f_score: "harmonic mean of precision and recall at 5 mm and 10 mm, percent".into(),
            mpjpe: "root-relative (joint 0) mean joint error, mm".into(),
            cd_h: "chamfer distance with each object expressed in its own hand-root frame, cm^2".into(),
            add: "mean model-vertex error (ADD) / closest-point error (ADD-S) below 10% of the model diameter".into(),
            alignment: "none: predictions are compared in the camera frame as produced".into(),
            samples: EVAL_SAMPLES,
        }
    }
}

/// Sequence-level evaluation over the tracked frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mpjpe_mm: f64,
    pub cd_cm2: f64,
    pub f5_pct: f64,
    pub f10_pct: f64,
    pub cdh_cm2: f64,
    pub success_rate_pct: f64,
    pub rot_err_deg: f64,
    pub trans_err_mm: f64,
    pub add_pct: f64,
    pub adds_pct: f64,
    pub frames_evaluated: usize,
    pub per_frame: Vec<FrameMetrics>,
    pub conventions: Conventions,
}

impl EvalReport {
    pub fn check_finite(&self) -> Result<()> {
        let top = [
            ("mpjpe_mm", self.mpjpe_mm),
            ("cd_cm2", self.cd_cm2),
            ("f5_pct", self.f5_pct),
            ("f10_pct", self.f10_pct),
            ("cdh_cm2", self.cdh_cm2),
            ("success_rate_pct", self.success_rate_pct),
            ("rot_err_deg", self.rot_err_deg),
            ("trans_err_mm", self.trans_err_mm),
            ("add_pct", self.add_pct),
            ("adds_pct", self.adds_pct),
        ];
        for (name, v) in top {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue(name.into()));
            }
        }
        Ok(())
    }
}

/// Compares a tracking result with ground truth on every tracked frame.
pub fn evaluate(seq: &dyn FrameSource, gt: &GroundTruth, pred: &TrackResult, seed: u64) -> Result<EvalReport> {
    if pred.frames.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mesh = seq.canonical_mesh();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let canon: Vec<Vec3> = mesh.sample_surface(EVAL_SAMPLES, &mut rng).into_iter().map(|s| s.point).collect();
    let gt_scale = AnisoScale::new(gt.object_scale[0], gt.object_scale[1], gt.object_scale[2])?;
    let model = mesh.map_vertices(|v| gt_scale.apply(v));
    let diameter = model.diameter();

    let mut per_frame = Vec::with_capacity(pred.frames.len());
    for est in &pred.frames {
        let g = gt
            .frame(est.index)
            .ok_or_else(|| Error::InvalidConfig(format!("ground truth lacks frame {}", est.index)))?;
        let gt_pose = g.object_pose()?;
        let frame = seq.frame(est.index)?;
        let hand = &frame.hand;
        let gt_t = Vec3::from(g.hand_t);
        let pj = hand.camera_joints(pred.hand_scale, &est.hand_translation);
        let gj = hand.camera_joints(gt.hand_scale, &gt_t);

        let pc: Vec<Vec3> = canon.iter().map(|x| est.object_pose.transform(&est.object_scale.apply(x))).collect();
        let gc: Vec<Vec3> = canon.iter().map(|x| gt_pose.transform(&gt_scale.apply(x))).collect();
        let ch = chamfer_fscore(&pc, &gc, &F_THRESHOLDS_M)?;
        let pred_root = RigidPose::new(hand.rotation, pj[0]);
        let gt_root = RigidPose::new(hand.rotation, gj[0]);
        let pe = pose_errors(&est.object_pose, &gt_pose, model.vertices(), diameter, 0.1)?;
        per_frame.push(FrameMetrics {
            index: est.index,
            mpjpe_mm: mpjpe(&pj, &gj)?,
            cd_cm2: ch.cd_cm2,
            f5_pct: ch.f_pct[0],
            f10_pct: ch.f_pct[1],
            cdh_cm2: cd_hand_relative(&pc, &gc, &pred_root, &gt_root)?,
            rot_err_deg: pe.rot_deg,
            trans_err_mm: pe.trans_mm,
            add_pass: pe.add_pass,
            adds_pass: pe.adds_pass,
        });
    }
    let n = per_frame.len() as f64;
    let mean = |f: &dyn Fn(&FrameMetrics) -> f64| per_frame.iter().map(f).sum::<f64>() / n;
    let pct = |f: &dyn Fn(&FrameMetrics) -> bool| 100.0 * per_frame.iter().filter(|m| f(m)).count() as f64 / n;
    Ok(EvalReport {
        mpjpe_mm: mean(&|m| m.mpjpe_mm),
        cd_cm2: mean(&|m| m.cd_cm2),
        f5_pct: mean(&|m| m.f5_pct),
        f10_pct: mean(&|m| m.f10_pct),
        cdh_cm2: mean(&|m| m.cdh_cm2),
        success_rate_pct: success_rate(std::slice::from_ref(pred))?,
        rot_err_deg: mean(&|m| m.rot_err_deg),
        trans_err_mm: mean(&|m| m.trans_err_mm),
        add_pct: pct(&|m| m.add_pass),
        adds_pct: pct(&|m| m.adds_pass),
        frames_evaluated: per_frame.len(),
        per_frame,
        conventions: Conventions::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    fn joints() -> Vec<Vec3> {
        (0..21).map(|i| Vec3::new(0.01 * i as f64, 0.003 * (i % 4) as f64, 0.5)).collect()
    }

    #[test]
    fn mpjpe_examples() {
        let g = joints();
        assert_eq!(mpjpe(&g, &g).unwrap(), 0.0);
        let shifted: Vec<Vec3> = g.iter().map(|p| p + Vec3::new(0.003, 0.0, 0.0)).collect();
        assert!(mpjpe(&shifted, &g).unwrap().abs() < 1e-9);
        let mut one = g.clone();
        one[7].x += 0.021;
        assert!((mpjpe(&one, &g).unwrap() - 1.0).abs() < 1e-9);
        assert!(matches!(mpjpe(&g[..20], &g), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn chamfer_examples() {
        let a = vec![Vec3::zeros()];
        let b = vec![Vec3::new(0.01, 0.0, 0.0)];
        let r = chamfer_fscore(&a, &b, &F_THRESHOLDS_M).unwrap();
        assert!((r.cd_cm2 - 2.0).abs() < 1e-12);
        assert_eq!(r.f_pct[0], 0.0);
        let same = chamfer_fscore(&joints(), &joints(), &F_THRESHOLDS_M).unwrap();
        assert_eq!(same.cd_cm2, 0.0);
        assert_eq!(same.f_pct, vec![100.0, 100.0]);
        assert!(matches!(chamfer_fscore(&[], &b, &[]), Err(Error::EmptyCloud)));
    }

    #[test]
    fn pose_error_examples() {
        let model: Vec<Vec3> = (0..8)
            .map(|i| {
                let a = i as f64 * std::f64::consts::FRAC_PI_4;
                Vec3::new(0.025 * a.cos(), 0.025 * a.sin(), 0.0)
            })
            .collect();
        let id = RigidPose::identity();
        let e = pose_errors(&id, &id, &model, 0.05, 0.1).unwrap();
        assert_eq!((e.rot_deg, e.trans_mm), (0.0, 0.0));
        assert!(e.add_pass && e.adds_pass);
        let flip = RigidPose::new(UnitQuaternion::from_euler_angles(0.0, 0.0, std::f64::consts::PI), Vec3::zeros());
        let e = pose_errors(&flip, &id, &model, 0.05, 0.1).unwrap();
        assert!(!e.add_pass && e.adds_pass);
        let shift = RigidPose::from_translation(Vec3::new(0.01, 0.0, 0.0));
        let e = pose_errors(&shift, &id, &model, 0.05, 0.1).unwrap();
        assert!((e.add_mm - 10.0).abs() < 1e-9 && !e.add_pass);
    }

    #[test]
    fn success_rate_examples() {
        let ok = TrackResult {
            iof_index: 0,
            hand_scale: 1.0,
            frames: vec![],
            failure: None,
        };
        let bad = TrackResult {
            failure: Some("drift".into()),
            ..ok.clone()
        };
        assert_eq!(success_rate(&[ok.clone(), ok.clone()]).unwrap(), 100.0);
        assert_eq!(success_rate(&[bad.clone(), ok.clone(), ok.clone(), ok]).unwrap(), 75.0);
        assert_eq!(success_rate(&[bad]).unwrap(), 0.0);
        assert!(matches!(success_rate(&[]), Err(Error::EmptyInput)));
    }
}
