//! Metric initialization of a sequence: onset frame, hand and object scale, per-frame
//! hand translation, and the onset object pose.

use nalgebra::{Unit, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{
    detect_iof, front_surface_points, pnp_translation, snap_to_stride, trimmed_icp_scale, IcpInit,
};
use crate::data::{FrameObservation, FrameSource, GroundTruth, OnsetPose};
use crate::error::{Error, Result};
use crate::geometry::{unproject_masked, AnisoScale, CameraIntrinsics, RigidPose, Vec3};
use crate::raster::{classify_points, PointClass, SilhouetteRenderer};
use crate::tracker::{TrackInputs, TrackerConfig};

/// Contents of `init.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitResult {
    pub hand_scale: f64,
    pub object_scale: f64,
    pub iof_index: usize,
    /// Onset frame before snapping to the processing stride.
    pub iof_raw: usize,
    pub motion_ratios: Vec<f64>,
    pub per_frame_hand_translation: Vec<[f64; 3]>,
    /// Frames whose ICP scale entered the object-scale median.
    pub object_scale_frames: Vec<usize>,
}

const CANONICAL_SAMPLES: usize = 6000;
const VISIBILITY_ROUNDS: usize = 2;
const RAY_FIT_ROUNDS: usize = 10;
const MIN_RAY_FIT_VERTICES: usize = 10;

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Keeps the camera-facing side of a point set (orthographic approximation along +z).
fn front_side(points: &[Vec3]) -> Vec<Vec3> {
    let (lo, hi) = points.iter().fold((Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)), |(lo, hi), p| {
        (lo.inf(p), hi.sup(p))
    });
    let cell = (hi - lo).norm() / 60.0;
    front_surface_points(points, cell, cell)
}

/// Refines a hand scale against the depth map with the hand held on its keypoint rays.
///
/// Scaling the hand and its PnP translation together leaves every projection unchanged,
/// so each visible vertex keeps its pixel and only its depth varies: `s · z₁ ≈ d`.
/// Pixel-to-vertex association avoids the shrinking bias nearest-neighbor matching
/// shows on a sparse vertex set.
fn refine_hand_scale_along_rays(f: &FrameObservation, k: &CameraIntrinsics, init: f64, depth_eps: f64) -> Result<f64> {
    let t1 = pnp_translation(&f.hand.joints3d, &f.hand.joints2d, k, &UnitQuaternion::identity(), 1.0)?;
    let mut scale = init;
    for _ in 0..RAY_FIT_ROUNDS {
        let (mut num, mut den, mut used) = (0.0, 0.0, 0usize);
        for v in &f.hand.vertices {
            let p = v + t1;
            let Ok(uv) = k.project(&p) else { continue };
            let (u, w) = (uv.x.round(), uv.y.round());
            if u < 0.0 || w < 0.0 || u >= k.width as f64 || w >= k.height as f64 {
                continue;
            }
            let (u, w) = (u as usize, w as usize);
            let d = f.depth.get(u, w) as f64;
            if f.mask_hand.get(u, w) && (scale * p.z - d).abs() <= depth_eps {
                num += p.z * d;
                den += p.z * p.z;
                used += 1;
            }
        }
        if used < MIN_RAY_FIT_VERTICES {
            return Err(Error::TooFewPoints {
                needed: MIN_RAY_FIT_VERTICES,
                got: used,
            });
        }
        scale = num / den;
    }
    Ok(scale)
}

/// Onset object pose: the external estimate when present, otherwise ground truth at the
/// onset frame perturbed by the configured noise.
pub fn resolve_onset_pose(
    onset: Option<&OnsetPose>,
    gt: Option<&GroundTruth>,
    iof_index: usize,
    cfg: &TrackerConfig,
) -> Result<RigidPose> {
    if let Some(p) = onset {
        if let Some(f) = p.frame_index.filter(|&f| f != iof_index) {
            log::warn!("onset pose was estimated for frame {f}, onset frame is {iof_index}");
        }
        return p.pose();
    }
    let gt = gt.ok_or(Error::NoOnsetPose)?;
    let frame = gt.frame(iof_index).ok_or(Error::NoOnsetPose)?;
    let pose = frame.object_pose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0A5E_7F00);
    let axis = Unit::new_normalize(Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ));
    let dir = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    )
    .normalize();
    let dq = UnitQuaternion::from_axis_angle(&axis, cfg.onset_noise_rot_deg.to_radians());
    Ok(RigidPose::new(
        dq * pose.rotation,
        pose.translation + dir * (cfg.onset_noise_trans_mm * 1e-3),
    ))
}

/// Runs the whole initialization. `onset_pose` supplies the fixed rotation for object
/// scale registration; it is resolved after the onset frame is known.
pub fn initialize(
    seq: &dyn FrameSource,
    cfg: &TrackerConfig,
    onset: Option<&OnsetPose>,
    gt: Option<&GroundTruth>,
) -> Result<(InitResult, RigidPose)> {
    cfg.validate()?;
    let meta = seq.meta();
    let k = meta.intrinsics;
    let n = meta.frame_count;
    let frames = (0..n).map(|i| seq.frame(i)).collect::<Result<Vec<_>>>()?;

    let obj_masks: Vec<_> = frames.iter().map(|f| f.mask_obj.clone()).collect();
    let hand_masks: Vec<_> = frames.iter().map(|f| f.mask_hand.clone()).collect();
    let (iof_raw, motion_ratios) = if n >= 2 {
        let r = detect_iof(&obj_masks, &hand_masks, cfg.tau, cfg.border_margin)?;
        (r.frame_index, r.motion_ratios)
    } else {
        (0, Vec::new())
    };
    let iof_index = snap_to_stride(iof_raw, cfg.stride, n);
    let onset_pose = resolve_onset_pose(onset, gt, iof_index, cfg)?;

    // hand scale: median over processed frames with enough visible hand
    let mut hand_scales = Vec::new();
    for f in frames.iter().step_by(cfg.stride) {
        if f.mask_hand.count() < cfg.min_hand_area || f.hand.vertices.len() < 10 {
            continue;
        }
        let target = unproject_masked(&f.depth, &f.mask_hand, &k)?;
        if target.len() < 10 {
            continue;
        }
        let source = front_side(&f.hand.vertices);
        let id = UnitQuaternion::identity();
        let fit = trimmed_icp_scale(&source, target.points(), &id, cfg.trim_fraction, cfg.icp_iters, None)
            .and_then(|icp| refine_hand_scale_along_rays(f, &k, icp.scale, cfg.depth_eps));
        match fit {
            Ok(scale) => hand_scales.push(scale),
            Err(e) => log::warn!("frame {}: hand scale registration failed: {e}", f.index),
        }
    }
    let hand_scale = median(hand_scales).ok_or_else(|| {
        Error::DegenerateConfiguration("no frame allowed hand scale registration".into())
    })?;

    // object scale: frames up to the onset share the onset rotation
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5CA1E);
    let canonical: Vec<Vec3> = seq
        .canonical_mesh()
        .sample_surface(CANONICAL_SAMPLES, &mut rng)
        .into_iter()
        .map(|s| onset_pose.rotation * s.point)
        .collect();
    if canonical.is_empty() {
        return Err(Error::DegenerateMesh("canonical mesh has no surface".into()));
    }
    let source = front_side(&canonical);
    let unrot: Vec<Vec3> = source.iter().map(|p| onset_pose.rotation.inverse_transform_vector(p)).collect();
    let all_unrot: Vec<Vec3> = canonical.iter().map(|p| onset_pose.rotation.inverse_transform_vector(p)).collect();
    let renderer = SilhouetteRenderer::new(seq.canonical_mesh());
    // coarse fit against the orthographic front side, then refit on the samples a
    // perspective render at the coarse placement sees
    let register = |i: usize| -> Result<f64> {
        let f = &frames[i];
        let target = unproject_masked(&f.depth, &f.mask_obj, &k)?;
        let rot = &onset_pose.rotation;
        let mut fit = trimmed_icp_scale(&unrot, target.points(), rot, cfg.trim_fraction, cfg.icp_iters, None)?;
        for _ in 0..VISIBILITY_ROUNDS {
            let pose = RigidPose::new(*rot, fit.translation);
            let scale = AnisoScale::isotropic(fit.scale);
            let render = renderer.render(&pose, &scale, &k, cfg.sharpness);
            let cam: Vec<Vec3> = all_unrot.iter().map(|p| pose.transform(&scale.apply(p))).collect();
            let classes = classify_points(&cam, &render, &f.mask_hand, &k, cfg.depth_eps)?;
            let visible: Vec<Vec3> = all_unrot
                .iter()
                .zip(&classes)
                .filter(|(_, c)| **c == PointClass::Visible)
                .map(|(p, _)| *p)
                .collect();
            let init = IcpInit {
                scale: fit.scale,
                translation: fit.translation,
            };
            fit = trimmed_icp_scale(&visible, target.points(), rot, cfg.trim_fraction, cfg.icp_iters, Some(init))?;
        }
        Ok(fit.scale)
    };
    let mut object_scales = Vec::new();
    let mut object_scale_frames = Vec::new();
    for i in 0..=iof_index {
        let f = &frames[i];
        let area = f.mask_obj.count();
        let overlap = f.mask_hand.count() as f64 / (area + f.mask_hand.count()).max(1) as f64;
        if area < cfg.min_object_area || overlap >= cfg.max_hand_overlap {
            continue;
        }
        match register(i) {
            Ok(s) => {
                object_scales.push(s);
                object_scale_frames.push(i);
            }
            Err(e) => log::warn!("frame {i}: object scale registration failed: {e}"),
        }
    }
    let object_scale = match median(object_scales) {
        Some(s) => s,
        None => {
            if frames[iof_index].mask_obj.count() == 0 {
                return Err(Error::EmptyObjectMask(iof_index));
            }
            object_scale_frames = vec![iof_index];
            register(iof_index)?
        }
    };

    let per_frame_hand_translation = frames
        .iter()
        .map(|f| {
            pnp_translation(&f.hand.joints3d, &f.hand.joints2d, &k, &UnitQuaternion::identity(), hand_scale)
                .map(|t| [t.x, t.y, t.z])
        })
        .collect::<Result<Vec<_>>>()?;

    Ok((
        InitResult {
            hand_scale,
            object_scale,
            iof_index,
            iof_raw,
            motion_ratios,
            per_frame_hand_translation,
            object_scale_frames,
        },
        onset_pose,
    ))
}

impl InitResult {
    pub fn track_inputs(&self, onset_pose: RigidPose) -> TrackInputs {
        TrackInputs {
            iof_index: self.iof_index,
            hand_scale: self.hand_scale,
            object_scale: self.object_scale,
            onset_pose,
            hand_translations: self
                .per_frame_hand_translation
                .iter()
                .map(|t| Vec3::new(t[0], t[1], t[2]))
                .collect(),
        }
    }

    pub fn validate(&self, frame_count: usize) -> Result<()> {
        if self.per_frame_hand_translation.len() != frame_count || self.iof_index >= frame_count {
            return Err(Error::InvalidConfig(format!(
                "init result covers {} frames with onset {}, sequence has {frame_count}",
                self.per_frame_hand_translation.len(),
                self.iof_index
            )));
        }
        if !(self.hand_scale > 0.0 && self.object_scale > 0.0) {
            return Err(Error::InvalidConfig("init scales must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GtFrame;

    fn gt() -> GroundTruth {
        GroundTruth {
            object_scale: [1.0; 3],
            hand_scale: 1.0,
            iof_index: 3,
            frames: vec![GtFrame {
                index: 3,
                obj_q_wxyz: [1.0, 0.0, 0.0, 0.0],
                obj_t: [0.0, 0.0, 0.5],
                hand_t: [0.0; 3],
            }],
        }
    }

    fn quiet_cfg() -> TrackerConfig {
        TrackerConfig {
            onset_noise_rot_deg: 0.0,
            onset_noise_trans_mm: 0.0,
            ..TrackerConfig::default()
        }
    }

    #[test]
    fn external_onset_pose_wins_over_ground_truth() {
        let onset = OnsetPose {
            frame_index: Some(3),
            obj_q_wxyz: [0.0, 1.0, 0.0, 0.0],
            obj_t: [0.1, 0.0, 0.4],
        };
        let p = resolve_onset_pose(Some(&onset), Some(&gt()), 3, &TrackerConfig::default()).unwrap();
        assert_eq!(p, onset.pose().unwrap());
    }

    #[test]
    fn ground_truth_fallback_is_perturbed_by_the_configured_noise() {
        let g = gt();
        let exact = resolve_onset_pose(None, Some(&g), 3, &quiet_cfg()).unwrap();
        assert_eq!(exact, g.frames[0].object_pose().unwrap());
        let cfg = TrackerConfig {
            onset_noise_rot_deg: 4.0,
            onset_noise_trans_mm: 7.0,
            ..TrackerConfig::default()
        };
        let noisy = resolve_onset_pose(None, Some(&g), 3, &cfg).unwrap();
        assert!((noisy.rotation_angle_to(&exact).to_degrees() - 4.0).abs() < 1e-9);
        assert!(((noisy.translation - exact.translation).norm() - 7e-3).abs() < 1e-12);
        assert_eq!(noisy, resolve_onset_pose(None, Some(&g), 3, &cfg).unwrap());
    }

    #[test]
    fn no_onset_source_is_an_error() {
        let cfg = TrackerConfig::default();
        assert!(matches!(resolve_onset_pose(None, None, 3, &cfg), Err(Error::NoOnsetPose)));
        assert!(matches!(resolve_onset_pose(None, Some(&gt()), 4, &cfg), Err(Error::NoOnsetPose)));
    }
}
