//! Metric initialization: rotation-constrained trimmed ICP for scale, translation-only
//! PnP for hand placement, and interaction-onset frame detection.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, CameraIntrinsics, Vec2, Vec3};
use crate::spatial::PointIndex;

pub const DEFAULT_TRIM_FRACTION: f64 = 0.8;
pub const DEFAULT_ICP_ITERS: usize = 300;
pub const DEFAULT_BORDER_MARGIN: usize = 2;
pub const DEFAULT_TAU: f64 = 0.025;
pub const IOF_EPS: f64 = 1e-8;
/// Stop once a round moves the scale by less than this fraction and the translation by
/// less than this many meters; point-to-point ICP creeps too slowly for an rms test.
const ICP_STEP_TOL: f64 = 1e-7;
const MIN_ICP_POINTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleAlignResult {
    pub scale: f64,
    pub translation: Vec3,
    pub rms: f64,
    pub inlier_fraction: f64,
    pub iterations: usize,
}

/// Optional starting point for [`trimmed_icp_scale`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpInit {
    pub scale: f64,
    pub translation: Vec3,
}

/// Aligns `source` (rotated by `fixed_rotation`) to `target` with a scale and a
/// translation, discarding the worst `1 − trim_fraction` of correspondences each round.
///
/// Correspondences run from every target point to its nearest transformed source point,
/// so a partial scan can be matched against a complete model.
pub fn trimmed_icp_scale(
    source: &[Vec3],
    target: &[Vec3],
    fixed_rotation: &UnitQuaternion<f64>,
    trim_fraction: f64,
    max_iters: usize,
    init: Option<IcpInit>,
) -> Result<ScaleAlignResult> {
    for n in [source.len(), target.len()] {
        if n < MIN_ICP_POINTS {
            return Err(Error::TooFewPoints {
                needed: MIN_ICP_POINTS,
                got: n,
            });
        }
    }
    if !(trim_fraction > 0.0 && trim_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "trim fraction must be in (0, 1], got {trim_fraction}"
        )));
    }
    let rotated: Vec<Vec3> = source.iter().map(|p| fixed_rotation * p).collect();
    let src_spread = robust_spread(&rotated);
    if !(src_spread > 0.0) {
        return Err(Error::DegenerateSource);
    }
    let (mut scale, mut translation) = match init {
        Some(i) => (i.scale, i.translation),
        None => {
            let s = robust_spread(target) / src_spread;
            let s = if s > 0.0 { s } else { 1.0 };
            (s, median_point(target) - median_point(&rotated) * s)
        }
    };
    let index = PointIndex::new(&rotated).expect("source is non-empty");
    let keep = ((trim_fraction * target.len() as f64).ceil() as usize).clamp(3, target.len());

    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(target.len());
    let mut rms = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..max_iters.max(1) {
        iterations = it + 1;
        // nearest neighbours are scale-covariant, so query in the source frame
        pairs.clear();
        for (qi, q) in target.iter().enumerate() {
            let local = (q - translation) / scale;
            let (si, _) = index.nearest(&local);
            let r2 = (rotated[si] * scale + translation - q).norm_squared();
            pairs.push((r2, qi, si));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let kept = &pairs[..keep];

        let n = kept.len() as f64;
        let (new_scale, new_translation) =
            fit_scale_translation(kept.iter().map(|&(_, qi, si)| (rotated[si], target[qi])))?;
        let step_small = (new_scale - scale).abs() < ICP_STEP_TOL * scale
            && (new_translation - translation).norm() < ICP_STEP_TOL;
        scale = new_scale;
        translation = new_translation;

        rms = (kept
            .iter()
            .map(|&(_, qi, si)| (rotated[si] * scale + translation - target[qi]).norm_squared())
            .sum::<f64>()
            / n)
            .sqrt();
        if step_small {
            break;
        }
    }

    let gate = (2.5 * rms).max(1e-12);
    let inliers = target
        .iter()
        .filter(|q| {
            let (si, _) = index.nearest(&((*q - translation) / scale));
            (rotated[si] * scale + translation - *q).norm() <= gate
        })
        .count();
    Ok(ScaleAlignResult {
        scale,
        translation,
        rms,
        inlier_fraction: (inliers as f64 / target.len() as f64).max(1.0 / target.len() as f64),
        iterations,
    })
}

/// Closed-form least-squares `s, t` minimizing `Σ‖s·p + t − q‖²` over `(p, q)` pairs
/// (`p` already rotated).
pub fn fit_scale_translation(pairs: impl Iterator<Item = (Vec3, Vec3)> + Clone) -> Result<(f64, Vec3)> {
    let (mut p_bar, mut q_bar, mut n) = (Vec3::zeros(), Vec3::zeros(), 0usize);
    for (p, q) in pairs.clone() {
        p_bar += p;
        q_bar += q;
        n += 1;
    }
    if n == 0 {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    p_bar /= n as f64;
    q_bar /= n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (p, q) in pairs {
        let dp = p - p_bar;
        num += dp.dot(&(q - q_bar));
        den += dp.norm_squared();
    }
    if !(den > 0.0) {
        return Err(Error::DegenerateSource);
    }
    let scale = num / den;
    if !(scale > 0.0) {
        return Err(Error::DegenerateConfiguration("scale estimate became non-positive".into()));
    }
    Ok((scale, q_bar - p_bar * scale))
}

/// Keeps the points nearest the camera within each `cell × cell` column along +z.
///
/// A cheap stand-in for visibility when the source is a full model and the target a
/// single-view scan.
pub fn front_surface_points(points: &[Vec3], cell: f64, depth_tol: f64) -> Vec<Vec3> {
    use std::collections::BTreeMap;
    let key = |p: &Vec3| ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);
    let mut front: BTreeMap<(i64, i64), f64> = BTreeMap::new();
    for p in points {
        let e = front.entry(key(p)).or_insert(f64::INFINITY);
        *e = e.min(p.z);
    }
    points
        .iter()
        .filter(|p| p.z <= front[&key(p)] + depth_tol)
        .copied()
        .collect()
}

fn median_point(points: &[Vec3]) -> Vec3 {
    let med = |axis: usize| {
        let mut v: Vec<f64> = points.iter().map(|p| p[axis]).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    Vec3::new(med(0), med(1), med(2))
}

fn robust_spread(points: &[Vec3]) -> f64 {
    let c = median_point(points);
    let mut d: Vec<f64> = points.iter().map(|p| (p - c).norm()).collect();
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Camera translation placing `scale · R · joints3d` onto `joints2d`.
///
/// The projection equations are cross-multiplied into a linear system in the translation,
/// then mean squared reprojection error is refined with damped Gauss–Newton. Joints with
/// non-finite 2D coordinates are ignored.
pub fn pnp_translation(
    joints3d: &[Vec3],
    joints2d: &[Vec2],
    k: &CameraIntrinsics,
    fixed_rotation: &UnitQuaternion<f64>,
    scale: f64,
) -> Result<Vec3> {
    if joints3d.len() != joints2d.len() {
        return Err(Error::LengthMismatch {
            expected: joints3d.len(),
            actual: joints2d.len(),
        });
    }
    let pts: Vec<(Vec3, Vec2)> = joints3d
        .iter()
        .zip(joints2d)
        .filter(|(p, x)| p.iter().all(|c| c.is_finite()) && x.iter().all(|c| c.is_finite()))
        .map(|(p, x)| (fixed_rotation * p * scale, *x))
        .collect();
    if pts.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "need at least 3 valid joints, got {}",
            pts.len()
        )));
    }
    let centroid = pts.iter().map(|(p, _)| *p).sum::<Vec3>() / pts.len() as f64;
    let cov = pts.iter().fold(Matrix3::zeros(), |acc, (p, _)| {
        let d = p - centroid;
        acc + d * d.transpose()
    });
    let sv = cov.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(f64::total_cmp);
    if sv[1] <= 1e-12 * sv[2].max(1e-300) {
        return Err(Error::DegenerateConfiguration("joints are collinear".into()));
    }

    // rows: [fx, 0, -(u-cx)]·T = (u-cx)·Z - fx·X ; [0, fy, -(v-cy)]·T = (v-cy)·Z - fy·Y
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for (p, x) in &pts {
        let du = x.x - k.cx;
        let dv = x.y - k.cy;
        let rows = [
            (Vector3::new(k.fx, 0.0, -du), du * p.z - k.fx * p.x),
            (Vector3::new(0.0, k.fy, -dv), dv * p.z - k.fy * p.y),
        ];
        for (a, b) in rows {
            ata += a * a.transpose();
            atb += a * b;
        }
    }
    let mut t = ata
        .cholesky()
        .map(|c| c.solve(&atb))
        .ok_or_else(|| Error::DegenerateConfiguration("singular linear system".into()))?;

    let cost = |t: &Vec3| -> f64 {
        pts.iter()
            .map(|(p, x)| {
                let c = p + t;
                if c.z <= 1e-9 {
                    f64::INFINITY
                } else {
                    (k.project_unchecked(&c) - x).norm_squared()
                }
            })
            .sum::<f64>()
            / pts.len() as f64
    };
    let mut err = cost(&t);
    let mut lambda = 1e-6;
    for _ in 0..50 {
        let mut h = Matrix3::<f64>::zeros();
        let mut g = Vector3::<f64>::zeros();
        for (p, x) in &pts {
            let c = p + t;
            if c.z <= 1e-9 {
                continue;
            }
            let j = k.project_jacobian(&c);
            let r = k.project_unchecked(&c) - x;
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let mut improved = false;
        for _ in 0..10 {
            let damped = h + Matrix3::from_diagonal(&h.diagonal()) * lambda;
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            let cand = t + step;
            let e = cost(&cand);
            if e <= err {
                let rel = (err - e) / err.max(1e-300);
                t = cand;
                err = e;
                lambda = (lambda * 0.1).max(1e-12);
                improved = rel > 1e-14 && step.norm() > 1e-15;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    if pts.iter().any(|(p, _)| p.z + t.z <= 0.0) {
        return Err(Error::BehindCamera);
    }
    Ok(t)
}

/// Mean squared reprojection error of `scale · R · joints3d + t`.
pub fn reprojection_error(
    joints3d: &[Vec3],
    joints2d: &[Vec2],
    k: &CameraIntrinsics,
    fixed_rotation: &UnitQuaternion<f64>,
    scale: f64,
    t: &Vec3,
) -> f64 {
    let n = joints3d.len().min(joints2d.len()).max(1) as f64;
    joints3d
        .iter()
        .zip(joints2d)
        .map(|(p, x)| (k.project_unchecked(&(fixed_rotation * p * scale + t)) - x).norm_squared())
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnsetResult {
    pub frame_index: usize,
    pub motion_ratios: Vec<f64>,
}

/// Hand-independent object mask variation between consecutive frames.
pub fn motion_ratio(
    obj_a: &BinaryMask,
    obj_b: &BinaryMask,
    hand_a: &BinaryMask,
    hand_b: &BinaryMask,
) -> Result<f64> {
    let dims = obj_a.dims();
    for m in [obj_b, hand_a, hand_b] {
        if m.dims() != dims {
            return Err(Error::DimensionMismatch(format!(
                "mask {:?} vs {:?}",
                m.dims(),
                dims
            )));
        }
    }
    let changed = obj_a
        .bits()
        .iter()
        .zip(obj_b.bits())
        .zip(hand_a.bits().iter().zip(hand_b.bits()))
        .filter(|((a, b), (ha, hb))| a != b && **ha == 0 && **hb == 0)
        .count();
    Ok(changed as f64 / (obj_a.count() as f64 + IOF_EPS))
}

/// First frame whose outgoing motion ratio exceeds `tau` while its object mask stays at
/// least `border_margin` pixels away from every image edge; frame 0 if none qualifies.
pub fn detect_iof(
    obj_masks: &[BinaryMask],
    hand_masks: &[BinaryMask],
    tau: f64,
    border_margin: usize,
) -> Result<OnsetResult> {
    if obj_masks.len() != hand_masks.len() {
        return Err(Error::LengthMismatch {
            expected: obj_masks.len(),
            actual: hand_masks.len(),
        });
    }
    if obj_masks.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: obj_masks.len(),
        });
    }
    let motion_ratios = (0..obj_masks.len() - 1)
        .map(|i| motion_ratio(&obj_masks[i], &obj_masks[i + 1], &hand_masks[i], &hand_masks[i + 1]))
        .collect::<Result<Vec<_>>>()?;
    let frame_index = motion_ratios
        .iter()
        .enumerate()
        .find(|&(i, &r)| {
            r > tau
                && obj_masks[i]
                    .border_distance()
                    .is_some_and(|d| d >= border_margin)
        })
        .map_or(0, |(i, _)| i);
    Ok(OnsetResult {
        frame_index,
        motion_ratios,
    })
}

/// Nearest multiple of `stride` not beyond the last frame.
pub fn snap_to_stride(frame: usize, stride: usize, frame_count: usize) -> usize {
    let stride = stride.max(1);
    let last = frame_count.saturating_sub(1) / stride * stride;
    (((frame as f64 / stride as f64).round() as usize) * stride).min(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::primitives;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cloud(seed: u64, n: usize) -> Vec<Vec3> {
        let mesh = primitives::subdivided_box(Vec3::new(0.04, 0.03, 0.05), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        mesh.sample_surface(n, &mut rng).into_iter().map(|s| s.point).collect()
    }

    #[test]
    fn icp_recovers_exact_scale() {
        let src = cloud(1, 800);
        let tgt: Vec<Vec3> = src.iter().map(|p| p * 2.0).collect();
        let r = trimmed_icp_scale(&src, &tgt, &UnitQuaternion::identity(), 1.0, 50, None).unwrap();
        assert!((r.scale - 2.0).abs() < 1e-6);
        assert!(r.translation.norm() < 1e-6);
    }

    #[test]
    fn icp_identity() {
        let src = cloud(2, 500);
        let r = trimmed_icp_scale(&src, &src, &UnitQuaternion::identity(), 1.0, 50, None).unwrap();
        assert!((r.scale - 1.0).abs() < 1e-9);
        assert!(r.translation.norm() < 1e-9);
        assert!(r.rms < 1e-9);
    }

    #[test]
    fn icp_rejects_tiny_and_degenerate_clouds() {
        let few = vec![Vec3::zeros(); 5];
        let many = cloud(3, 50);
        assert!(matches!(
            trimmed_icp_scale(&few, &many, &UnitQuaternion::identity(), 0.8, 10, None),
            Err(Error::TooFewPoints { .. })
        ));
        let flat = vec![Vec3::new(1.0, 1.0, 1.0); 20];
        assert!(matches!(
            trimmed_icp_scale(&flat, &many, &UnitQuaternion::identity(), 0.8, 10, None),
            Err(Error::DegenerateSource)
        ));
    }

    #[test]
    fn icp_with_fixed_rotation_and_offset() {
        let src = cloud(4, 1500);
        let rot = UnitQuaternion::from_euler_angles(0.4, -0.2, 0.9);
        let t = Vec3::new(0.1, -0.05, 0.6);
        let tgt: Vec<Vec3> = src.iter().map(|p| rot * p * 1.3 + t).collect();
        let r = trimmed_icp_scale(&src, &tgt, &rot, 0.8, 60, None).unwrap();
        assert!((r.scale - 1.3).abs() < 1e-6, "{}", r.scale);
        assert!((r.translation - t).norm() < 1e-6);
    }

    #[test]
    fn icp_trimming_handles_outliers() {
        let src = cloud(5, 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tgt: Vec<Vec3> = src.iter().map(|p| p * 1.7 + Vec3::new(0.0, 0.0, 0.5)).collect();
        for q in tgt.iter_mut().take(100) {
            *q = Vec3::new(rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(1.0..2.0));
        }
        let r = trimmed_icp_scale(&src, &tgt, &UnitQuaternion::identity(), 0.8, 60, None).unwrap();
        assert!((r.scale - 1.7).abs() / 1.7 < 0.01, "{}", r.scale);
        assert!(r.inlier_fraction > 0.0 && r.inlier_fraction <= 1.0);
    }

    #[test]
    fn icp_scale_invariant_to_shared_translation() {
        let src = cloud(7, 600);
        let tgt: Vec<Vec3> = src.iter().map(|p| p * 0.9 + Vec3::new(0.01, 0.02, 0.4)).collect();
        let a = trimmed_icp_scale(&src, &tgt, &UnitQuaternion::identity(), 0.8, 60, None).unwrap();
        let shift = Vec3::new(0.3, -0.2, 0.1);
        let src2: Vec<Vec3> = src.iter().map(|p| p + shift).collect();
        let tgt2: Vec<Vec3> = tgt.iter().map(|p| p + shift).collect();
        let b = trimmed_icp_scale(&src2, &tgt2, &UnitQuaternion::identity(), 0.8, 60, None).unwrap();
        assert!((a.scale - b.scale).abs() < 1e-9);
    }

    #[test]
    fn pnp_noise_sensitivity() {
        let k = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
        let noise = Normal::new(0.0, 1.0).unwrap();
        let t_true = Vec3::new(0.02, -0.01, 0.5);
        let mut errs: Vec<f64> = (0..100u64)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let j3: Vec<Vec3> = (0..21)
                    .map(|_| Vec3::new(rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06), rng.random_range(-0.03..0.03)))
                    .collect();
                let j2: Vec<Vec2> = j3
                    .iter()
                    .map(|p| k.project(&(p + t_true)).unwrap() + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng)))
                    .collect();
                (pnp_translation(&j3, &j2, &k, &UnitQuaternion::identity(), 1.0).unwrap() - t_true).norm()
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        assert!(errs[94] < 0.005, "95th percentile {}", errs[94]);
    }

    #[test]
    fn pnp_exact_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
        let j3: Vec<Vec3> = (0..21)
            .map(|_| Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.03..0.03)))
            .collect();
        let t_true = Vec3::new(0.02, -0.01, 0.5);
        let j2: Vec<Vec2> = j3.iter().map(|p| k.project(&(p + t_true)).unwrap()).collect();
        let t = pnp_translation(&j3, &j2, &k, &UnitQuaternion::identity(), 1.0).unwrap();
        assert!((t - t_true).norm() < 1e-6);

        let cam_joints: Vec<Vec3> = j3.iter().map(|p| p + t_true).collect();
        let j2: Vec<Vec2> = cam_joints.iter().map(|p| k.project(p).unwrap()).collect();
        let t = pnp_translation(&cam_joints, &j2, &k, &UnitQuaternion::identity(), 1.0).unwrap();
        assert!(t.norm() < 1e-9);
    }

    #[test]
    fn pnp_refinement_never_worse_than_linear_solution() {
        let k = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let noise = Normal::new(0.0, 2.0).unwrap();
        for _ in 0..20 {
            let j3: Vec<Vec3> = (0..21)
                .map(|_| Vec3::new(rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06), rng.random_range(-0.04..0.04)))
                .collect();
            let t_true = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(0.3..0.8));
            let j2: Vec<Vec2> = j3
                .iter()
                .map(|p| k.project(&(p + t_true)).unwrap() + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng)))
                .collect();
            let t = pnp_translation(&j3, &j2, &k, &UnitQuaternion::identity(), 1.0).unwrap();
            let refined = reprojection_error(&j3, &j2, &k, &UnitQuaternion::identity(), 1.0, &t);
            // linear-only baseline: a single refinement-free solve
            let linear = linear_only(&j3, &j2, &k);
            let base = reprojection_error(&j3, &j2, &k, &UnitQuaternion::identity(), 1.0, &linear);
            assert!(refined <= base + 1e-12);
        }
    }

    fn linear_only(j3: &[Vec3], j2: &[Vec2], k: &CameraIntrinsics) -> Vec3 {
        let mut ata = Matrix3::<f64>::zeros();
        let mut atb = Vector3::<f64>::zeros();
        for (p, x) in j3.iter().zip(j2) {
            let du = x.x - k.cx;
            let dv = x.y - k.cy;
            for (a, b) in [
                (Vector3::new(k.fx, 0.0, -du), du * p.z - k.fx * p.x),
                (Vector3::new(0.0, k.fy, -dv), dv * p.z - k.fy * p.y),
            ] {
                ata += a * a.transpose();
                atb += a * b;
            }
        }
        ata.cholesky().unwrap().solve(&atb)
    }

    #[test]
    fn pnp_rejects_degenerate_inputs() {
        let k = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
        let uv: Vec<Vec2> = line.iter().map(|p| k.project(&(p + Vec3::new(0.0, 0.0, 0.5))).unwrap()).collect();
        assert!(matches!(
            pnp_translation(&line, &uv, &k, &UnitQuaternion::identity(), 1.0),
            Err(Error::DegenerateConfiguration(_))
        ));
        let two = &line[..2];
        assert!(pnp_translation(two, &uv[..2], &k, &UnitQuaternion::identity(), 1.0).is_err());
    }

    fn square_mask(w: usize, h: usize, x0: usize, y0: usize, side: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(w, h);
        for v in y0..y0 + side {
            for u in x0..x0 + side {
                m.set(u, v, true);
            }
        }
        m
    }

    #[test]
    fn iof_static_sequence_falls_back_to_zero() {
        let obj = vec![square_mask(32, 32, 10, 10, 10); 4];
        let hand = vec![BinaryMask::zeros(32, 32); 4];
        let r = detect_iof(&obj, &hand, DEFAULT_TAU, DEFAULT_BORDER_MARGIN).unwrap();
        assert_eq!(r.frame_index, 0);
        assert!(r.motion_ratios.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn iof_detects_one_pixel_shift() {
        let obj = vec![
            square_mask(32, 32, 10, 10, 10),
            square_mask(32, 32, 10, 10, 10),
            square_mask(32, 32, 11, 10, 10),
        ];
        let hand = vec![BinaryMask::zeros(32, 32); 3];
        let r = detect_iof(&obj, &hand, DEFAULT_TAU, DEFAULT_BORDER_MARGIN).unwrap();
        assert_eq!(r.motion_ratios[1], 20.0 / (100.0 + IOF_EPS));
        assert_eq!(r.frame_index, 1);
    }

    #[test]
    fn iof_skips_border_contact() {
        let obj = vec![
            square_mask(32, 32, 0, 10, 10),
            square_mask(32, 32, 1, 10, 10),
            square_mask(32, 32, 4, 10, 10),
            square_mask(32, 32, 6, 10, 10),
        ];
        let hand = vec![BinaryMask::zeros(32, 32); 4];
        let r = detect_iof(&obj, &hand, DEFAULT_TAU, 1).unwrap();
        assert!(r.motion_ratios[0] > DEFAULT_TAU);
        assert_eq!(r.frame_index, 1);
        let r = detect_iof(&obj, &hand, DEFAULT_TAU, DEFAULT_BORDER_MARGIN).unwrap();
        assert_eq!(r.frame_index, 2);
    }

    #[test]
    fn iof_ignores_hand_covered_changes() {
        let obj = vec![square_mask(32, 32, 10, 10, 10), square_mask(32, 32, 11, 10, 10)];
        let hand = vec![square_mask(32, 32, 8, 8, 16), BinaryMask::zeros(32, 32)];
        let r = detect_iof(&obj, &hand, DEFAULT_TAU, DEFAULT_BORDER_MARGIN).unwrap();
        assert_eq!(r.motion_ratios[0], 0.0);
    }

    #[test]
    fn stride_snapping() {
        assert_eq!(snap_to_stride(12, 5, 60), 10);
        assert_eq!(snap_to_stride(13, 5, 60), 15);
        assert_eq!(snap_to_stride(59, 5, 60), 55);
        assert_eq!(snap_to_stride(7, 1, 60), 7);
    }

    #[test]
    fn front_surface_keeps_near_side() {
        let pts = vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 1.1), Vec3::new(0.5, 0.0, 1.2)];
        let f = front_surface_points(&pts, 0.1, 0.01);
        assert_eq!(f, vec![pts[0], pts[2]]);
    }
}
