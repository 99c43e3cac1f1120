//! Synthetic hand-object sequences with exact ground truth.
//!
//! The hand is a rigid "claw" of 21 joint spheres gripping the object: thumb on the −x
//! face, four fingers on the +x face, knuckles in front of the camera-facing −z face.
//! Before the onset frame the object rests while the hand slides into place along −y;
//! afterwards hand and object move together.

use std::path::{Path, PathBuf};

use nalgebra::{Unit, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{FrameObservation, GroundTruth, GtFrame, MemorySequence, SequenceMeta};
use crate::error::{Error, Result};
use crate::geometry::{
    primitives, AnisoScale, BinaryMask, CameraIntrinsics, DepthMap, HandFrameObservation, RigidPose, TriMesh, Vec2,
    Vec3, NUM_JOINTS,
};
use crate::losses::FeatureGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ObjectSpec {
    Cube,
    Cylinder,
    Mesh { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub object: ObjectSpec,
    pub frames: usize,
    /// Index of the last static frame.
    pub onset_frame: usize,
    pub rot_deg_per_frame: f64,
    pub trans_mm_per_frame: f64,
    /// Hand speed along -y while it closes in before the onset; 0 keeps the grasp fixed.
    pub hand_approach_mm_per_frame: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub object_distance: f64,
    pub object_scale: [f64; 3],
    pub hand_scale: f64,
    pub keypoint_noise_px: f64,
    pub depth_noise_mm: f64,
    pub mask_flip_rate: f64,
    pub feature_cell: usize,
    pub feature_channels: usize,
    pub stride: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            object: ObjectSpec::Cube,
            frames: 60,
            onset_frame: 10,
            rot_deg_per_frame: 1.2,
            trans_mm_per_frame: 1.5,
            hand_approach_mm_per_frame: 0.0,
            width: 320,
            height: 240,
            focal: 500.0,
            object_distance: 0.45,
            object_scale: [0.8, 0.8, 0.8],
            hand_scale: 1.1,
            keypoint_noise_px: 0.5,
            depth_noise_mm: 0.0,
            mask_flip_rate: 0.0,
            feature_cell: 4,
            feature_channels: 16,
            stride: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.frames == 0 || self.stride == 0 || self.feature_cell == 0 || self.feature_channels == 0 {
            return bad("frames, stride, feature_cell and feature_channels must be ≥ 1");
        }
        if self.width < 16 || self.height < 16 {
            return bad("image must be at least 16x16");
        }
        let nonneg = [
            self.rot_deg_per_frame,
            self.trans_mm_per_frame,
            self.hand_approach_mm_per_frame,
            self.keypoint_noise_px,
            self.depth_noise_mm,
            self.mask_flip_rate,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("motion amplitudes and noise levels must be finite and ≥ 0");
        }
        if self.mask_flip_rate > 1.0 {
            return bad("mask_flip_rate must be ≤ 1");
        }
        if !(self.focal > 0.0 && self.object_distance > 0.0 && self.hand_scale > 0.0) {
            return bad("focal, object_distance and hand_scale must be positive");
        }
        AnisoScale::new(self.object_scale[0], self.object_scale[1], self.object_scale[2])?;
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    fn canonical_mesh(&self) -> Result<TriMesh> {
        match &self.object {
            ObjectSpec::Cube => Ok(primitives::subdivided_box(Vec3::new(0.05, 0.04, 0.06), 4)),
            ObjectSpec::Cylinder => Ok(primitives::cylinder(0.045, 0.06, 24, 4)),
            ObjectSpec::Mesh { path } => TriMesh::read_obj(path),
        }
    }
}

// ---------------------------------------------------------------------------
// z-buffer over an arbitrary pixel lattice

/// Sample positions `image = scale · index + offset` along both axes.
#[derive(Debug, Clone, Copy)]
struct Lattice {
    nu: usize,
    nv: usize,
    scale: f64,
    offset: f64,
}

impl Lattice {
    fn pixels(k: &CameraIntrinsics) -> Self {
        Self {
            nu: k.width,
            nv: k.height,
            scale: 1.0,
            offset: 0.0,
        }
    }

    /// Centers of `cell × cell` blocks.
    fn cells(k: &CameraIntrinsics, cell: usize) -> Self {
        Self {
            nu: k.width.div_ceil(cell),
            nv: k.height.div_ceil(cell),
            scale: cell as f64,
            offset: (cell as f64 - 1.0) / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    depth: f64,
    face: usize,
    /// Perspective-correct barycentric coordinates.
    bary: [f64; 3],
}

fn zbuffer(cam: &[Vec3], faces: &[[usize; 3]], k: &CameraIntrinsics, lat: &Lattice) -> Vec<Option<Hit>> {
    let mut out: Vec<Option<Hit>> = vec![None; lat.nu * lat.nv];
    for (fi, f) in faces.iter().enumerate() {
        let p = f.map(|i| cam[i]);
        if p.iter().any(|q| q.z <= 1e-6) {
            continue;
        }
        let s = p.map(|q| (k.project_unchecked(&q) - Vec2::repeat(lat.offset)) / lat.scale);
        let area = (s[1] - s[0]).perp(&(s[2] - s[0]));
        if area.abs() < 1e-14 {
            continue;
        }
        let lo = s[0].inf(&s[1]).inf(&s[2]);
        let hi = s[0].sup(&s[1]).sup(&s[2]);
        if hi.x < 0.0 || hi.y < 0.0 || lo.x > (lat.nu - 1) as f64 || lo.y > (lat.nv - 1) as f64 {
            continue;
        }
        let u0 = lo.x.ceil().max(0.0) as usize;
        let v0 = lo.y.ceil().max(0.0) as usize;
        let u1 = (hi.x.floor() as usize).min(lat.nu - 1);
        let v1 = (hi.y.floor() as usize).min(lat.nv - 1);
        for v in v0..=v1 {
            for u in u0..=u1 {
                let q = Vec2::new(u as f64, v as f64);
                let b0 = (s[2] - s[1]).perp(&(q - s[1])) / area;
                let b1 = (s[0] - s[2]).perp(&(q - s[2])) / area;
                let b2 = 1.0 - b0 - b1;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                let w = [b0 / p[0].z, b1 / p[1].z, b2 / p[2].z];
                let sum = w[0] + w[1] + w[2];
                let depth = 1.0 / sum;
                let slot = &mut out[v * lat.nu + u];
                if slot.is_none_or(|h| depth < h.depth) {
                    *slot = Some(Hit {
                        depth,
                        face: fi,
                        bary: w.map(|x| x / sum),
                    });
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// hand proxy

/// Joint sphere: center and pole direction in the object's metric frame, radius in meters.
#[derive(Debug, Clone, Copy)]
struct JointSphere {
    center: Vec3,
    radius: f64,
    pole: Vec3,
}

const FINGER_R: f64 = 0.007;
/// Fingertip pads sit this far out on the front face, as a fraction of its half-width.
const PAD_X: f64 = 0.75;
const WRIST_R: f64 = 0.015;

/// 21 joints in the usual order: wrist, thumb CMC→tip, then index, middle, ring, little
/// (MCP, PIP, DIP, tip). `h` is the metric half-extent of the object's bounding box.
fn claw_joints(h: &Vec3) -> Vec<JointSphere> {
    let r = FINGER_R;
    let front = -h.z;
    let corner = 0.75 * r;
    let mut j = Vec::with_capacity(NUM_JOINTS);
    j.push(JointSphere {
        center: Vec3::new(0.0, -h.y - 0.03, front - 0.02),
        radius: WRIST_R,
        pole: Vec3::new(0.0, 1.0, 0.0),
    });
    let thumb_y = -0.35 * h.y;
    let side = |x_sign: f64, y: f64, z: f64| JointSphere {
        center: Vec3::new(x_sign * (h.x + r), y, z),
        radius: r,
        pole: Vec3::new(-x_sign, 0.0, 0.0),
    };
    let along = |t: f64| front + t * 2.0 * h.z;
    // thumb
    j.push(JointSphere {
        center: Vec3::new(-PAD_X * h.x, thumb_y - 0.01, front - r),
        radius: r,
        pole: Vec3::new(0.0, 0.0, 1.0),
    });
    j.push(JointSphere {
        center: Vec3::new(-h.x - corner, thumb_y, front - corner),
        radius: r,
        pole: Vec3::new(1.0, 0.0, 1.0).normalize(),
    });
    j.push(side(-1.0, thumb_y, along(0.3)));
    j.push(side(-1.0, thumb_y, along(0.6)));
    // fingers
    for f in 0..4 {
        let y = -0.6 * h.y + 0.4 * h.y * f as f64;
        j.push(JointSphere {
            center: Vec3::new(PAD_X * h.x, y, front - r),
            radius: r,
            pole: Vec3::new(0.0, 0.0, 1.0),
        });
        j.push(JointSphere {
            center: Vec3::new(h.x + corner, y, front - corner),
            radius: r,
            pole: Vec3::new(-1.0, 0.0, 1.0).normalize(),
        });
        j.push(side(1.0, y, along(0.3)));
        j.push(side(1.0, y, along(0.6)));
    }
    j
}

fn claw_mesh(joints: &[JointSphere]) -> TriMesh {
    joints
        .iter()
        .map(|s| primitives::uv_sphere(s.center, s.radius, s.pole, 6, 10))
        .reduce(|a, b| a.merged(&b))
        .expect("21 joints")
}

// ---------------------------------------------------------------------------
// features

/// Seeded random unit descriptors, one per vertex.
pub fn vertex_descriptors(count: usize, channels: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_unit(&mut rng, channels)).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..channels).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn interpolate_descriptor(mesh: &TriMesh, desc: &[Vec<f64>], hit: &Hit) -> Vec<f64> {
    let f = mesh.faces()[hit.face];
    let c = desc[f[0]].len();
    (0..c)
        .map(|j| (0..3).map(|i| hit.bary[i] * desc[f[i]][j]).sum())
        .collect()
}

/// Feature grid of a single posed object: the front-most surface point of every cell
/// carries its interpolated vertex descriptor, background cells are zero.
pub fn feature_oracle(
    mesh: &TriMesh,
    pose: &RigidPose,
    scale: &AnisoScale,
    k: &CameraIntrinsics,
    cell: usize,
    channels: usize,
    seed: u64,
) -> Result<(FeatureGrid, Vec<Vec<f64>>)> {
    let desc = vertex_descriptors(mesh.vertices().len(), channels, seed);
    let cam: Vec<Vec3> = mesh.vertices().iter().map(|v| pose.transform(&scale.apply(v))).collect();
    let lat = Lattice::cells(k, cell.max(1));
    let hits = zbuffer(&cam, mesh.faces(), k, &lat);
    let mut values = Vec::with_capacity(hits.len() * channels);
    for h in &hits {
        match h {
            Some(h) => values.extend(interpolate_descriptor(mesh, &desc, h)),
            None => values.extend(std::iter::repeat_n(0.0, channels)),
        }
    }
    Ok((FeatureGrid::new(lat.nv, lat.nu, channels, values)?, desc))
}

// ---------------------------------------------------------------------------
// motion

/// Object pose at every frame: static through `onset_frame`, then piecewise-slerped
/// rotation and sinusoidal translation with per-frame speed bounded by the config.
pub fn object_trajectory(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<RigidPose> {
    let r0 = UnitQuaternion::from_euler_angles(-0.3, 0.45, 0.08);
    let t0 = Vec3::new(0.0, 0.0, cfg.object_distance);
    let segment = 12usize;
    let step = cfg.rot_deg_per_frame.to_radians();
    let mut keys = vec![r0];
    let moving = cfg.frames.saturating_sub(cfg.onset_frame + 1);
    for _ in 0..moving.div_ceil(segment) {
        let axis = Unit::new_normalize(Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.5..0.5),
        ));
        let last = *keys.last().expect("non-empty");
        keys.push(UnitQuaternion::from_axis_angle(&axis, step * segment as f64) * last);
    }
    let period = 40.0;
    let amp = cfg.trans_mm_per_frame * 1e-3 / 3f64.sqrt() * period / (2.0 * std::f64::consts::PI);
    let phase: Vec3 = Vec3::new(0.0, 1.3, 2.1);
    let dir = Vec3::new(1.0, -1.0, 0.6);
    (0..cfg.frames)
        .map(|t| {
            if t <= cfg.onset_frame {
                return RigidPose::new(r0, t0);
            }
            let tau = (t - cfg.onset_frame) as f64;
            let seg = ((tau / segment as f64).floor() as usize).min(keys.len() - 2);
            let frac = (tau - (seg * segment) as f64) / segment as f64;
            let rot = keys[seg].slerp(&keys[seg + 1], frac.min(1.0));
            let w = 2.0 * std::f64::consts::PI / period;
            let off = Vec3::from_fn(|i, _| amp * dir[i].signum() * ((w * tau + phase[i]).sin() - phase[i].sin()));
            RigidPose::new(rot, t0 + off)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// sequence

/// Generates a complete in-memory sequence with ground truth.
pub fn generate_sequence(cfg: &SynthConfig) -> Result<MemorySequence> {
    cfg.validate()?;
    let k = cfg.intrinsics();
    let mesh = cfg.canonical_mesh()?;
    let scale = AnisoScale(Vec3::from(cfg.object_scale));
    let (lo, hi) = mesh
        .aabb()
        .ok_or_else(|| Error::DegenerateMesh("canonical mesh has no vertices".into()))?;
    let half = scale.apply(&((hi - lo) / 2.0));
    let center = scale.apply(&((hi + lo) / 2.0));
    let joints: Vec<JointSphere> = claw_joints(&half)
        .into_iter()
        .map(|mut s| {
            s.center += center;
            s
        })
        .collect();
    let hand_mesh = claw_mesh(&joints);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let poses = object_trajectory(cfg, &mut rng);
    let vertex_desc = vertex_descriptors(mesh.vertices().len(), cfg.feature_channels, cfg.seed ^ 0xDE5C);
    let mut desc_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4A4D);
    let hand_desc = random_unit(&mut desc_rng, cfg.feature_channels);
    let kp_noise = Normal::new(0.0, cfg.keypoint_noise_px.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let depth_noise =
        Normal::new(0.0, cfg.depth_noise_mm.max(0.0) * 1e-3).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let approach = Vec3::new(0.0, -1.0, 0.0) * (cfg.hand_approach_mm_per_frame * 1e-3);
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut gt_frames = Vec::with_capacity(cfg.frames);
    for (t, pose) in poses.iter().enumerate() {
        let offset = approach * cfg.onset_frame.saturating_sub(t) as f64;
        let obj_cam: Vec<Vec3> = mesh.vertices().iter().map(|v| pose.transform(&scale.apply(v))).collect();
        let hand_cam: Vec<Vec3> = hand_mesh.vertices().iter().map(|v| pose.transform(&(v + offset))).collect();
        let lat = Lattice::pixels(&k);
        let zo = zbuffer(&obj_cam, mesh.faces(), &k, &lat);
        let zh = zbuffer(&hand_cam, hand_mesh.faces(), &k, &lat);
        let mut depth = DepthMap::zeros(k.width, k.height);
        let mut mask_obj = BinaryMask::zeros(k.width, k.height);
        let mut mask_hand = BinaryMask::zeros(k.width, k.height);
        for v in 0..k.height {
            for u in 0..k.width {
                let i = v * k.width + u;
                let (o, h) = (zo[i].map(|x| x.depth), zh[i].map(|x| x.depth));
                let d = match (o, h) {
                    (Some(o), Some(h)) if h <= o => {
                        mask_hand.set(u, v, true);
                        h
                    }
                    (Some(o), _) => {
                        mask_obj.set(u, v, true);
                        o
                    }
                    (None, Some(h)) => {
                        mask_hand.set(u, v, true);
                        h
                    }
                    (None, None) => continue,
                };
                let noisy = if cfg.depth_noise_mm > 0.0 { d + depth_noise.sample(&mut rng) } else { d };
                depth.set(u, v, noisy.max(0.0) as f32);
            }
        }
        if cfg.mask_flip_rate > 0.0 {
            for m in [&mut mask_obj, &mut mask_hand] {
                for v in 0..k.height {
                    for u in 0..k.width {
                        if rng.random::<f64>() < cfg.mask_flip_rate {
                            let b = m.get(u, v);
                            m.set(u, v, !b);
                        }
                    }
                }
            }
        }

        let flat = Lattice::cells(&k, cfg.feature_cell);
        let fo = zbuffer(&obj_cam, mesh.faces(), &k, &flat);
        let fh = zbuffer(&hand_cam, hand_mesh.faces(), &k, &flat);
        let mut feat = Vec::with_capacity(flat.nu * flat.nv * cfg.feature_channels);
        for (o, h) in fo.iter().zip(&fh) {
            match (o, h) {
                (Some(o), h) if h.is_none_or(|h| o.depth < h.depth) => {
                    feat.extend(interpolate_descriptor(&mesh, &vertex_desc, o))
                }
                (_, Some(_)) => feat.extend_from_slice(&hand_desc),
                _ => feat.extend(std::iter::repeat_n(0.0, cfg.feature_channels)),
            }
        }
        let features = FeatureGrid::new(flat.nv, flat.nu, cfg.feature_channels, feat)?;

        // hand observation: rotation equals the object's, origin at the wrist
        let wrist = joints[0].center + offset;
        let hand_t = pose.transform(&wrist);
        let rotate = |x: &Vec3| pose.rotation * (x + offset - wrist) / cfg.hand_scale;
        let joints3d: Vec<Vec3> = joints.iter().map(|s| rotate(&s.center)).collect();
        let joints2d: Vec<Vec2> = joints
            .iter()
            .map(|s| {
                let p = pose.transform(&(s.center + offset));
                let mut uv = k.project_unchecked(&p);
                if cfg.keypoint_noise_px > 0.0 {
                    uv += Vec2::new(kp_noise.sample(&mut rng), kp_noise.sample(&mut rng));
                }
                uv
            })
            .collect();
        let vertices: Vec<Vec3> = hand_mesh.vertices().iter().map(rotate).collect();
        let hand = HandFrameObservation::new(vertices, joints3d, joints2d, pose.rotation)?;

        frames.push(FrameObservation {
            index: t,
            depth,
            mask_obj,
            mask_hand,
            features: Some(features),
            hand,
        });
        gt_frames.push(GtFrame {
            index: t,
            obj_q_wxyz: pose.wxyz(),
            obj_t: pose.translation_array(),
            hand_t: [hand_t.x, hand_t.y, hand_t.z],
        });
    }

    Ok(MemorySequence {
        meta: SequenceMeta {
            intrinsics: k,
            frame_count: cfg.frames,
            stride: cfg.stride,
            source: "synthetic".into(),
        },
        mesh,
        vertex_desc: Some(vertex_desc),
        frames,
        gt: Some(GroundTruth {
            object_scale: cfg.object_scale,
            hand_scale: cfg.hand_scale,
            iof_index: cfg.onset_frame.min(cfg.frames - 1),
            frames: gt_frames,
        }),
        onset_pose: None,
    })
}

/// Generates a sequence and writes it under `out_dir`.
pub fn write_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<MemorySequence> {
    let seq = generate_sequence(cfg)?;
    crate::io::write_sequence(&seq, out_dir)?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{trimmed_icp_scale, IcpInit};
    use crate::geometry::{to_object_frame, unproject_masked};
    use crate::init::initialize;
    use crate::tracker::TrackerConfig;
    use crate::raster::{classify_points, render_silhouette, PointClass};
    use crate::sdf::build_sdf;

    fn quiet(frames: usize) -> SynthConfig {
        SynthConfig {
            frames,
            onset_frame: 2.min(frames - 1),
            keypoint_noise_px: 0.0,
            ..SynthConfig::default()
        }
    }

    fn pose_of(seq: &MemorySequence, i: usize) -> RigidPose {
        seq.gt.as_ref().unwrap().frame(i).unwrap().object_pose().unwrap()
    }

    #[test]
    fn single_static_frame() {
        let cfg = SynthConfig {
            frames: 1,
            onset_frame: 0,
            rot_deg_per_frame: 0.0,
            trans_mm_per_frame: 0.0,
            ..SynthConfig::default()
        };
        let seq = generate_sequence(&cfg).unwrap();
        let first = object_trajectory(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))[0];
        let gt = pose_of(&seq, 0);
        assert!(gt.rotation_angle_to(&first) < 1e-12);
        assert_eq!(gt.translation, first.translation);
        assert_eq!(first.translation, Vec3::new(0.0, 0.0, cfg.object_distance));
        assert!(seq.frames[0].mask_obj.count() > 0 && seq.frames[0].mask_hand.count() > 0);
    }

    #[test]
    fn motion_respects_per_frame_bounds() {
        let cfg = SynthConfig::default();
        let poses = object_trajectory(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        for w in poses.windows(2) {
            assert!(w[0].rotation_angle_to(&w[1]).to_degrees() <= cfg.rot_deg_per_frame + 1e-9);
            assert!((w[0].translation - w[1].translation).norm() <= cfg.trans_mm_per_frame * 1e-3 + 1e-12);
        }
        assert!(poses[..=cfg.onset_frame].windows(2).all(|w| w[0] == w[1]));
        assert_ne!(poses[cfg.onset_frame], poses[cfg.onset_frame + 1]);
    }

    #[test]
    fn hand_grips_the_object() {
        let seq = generate_sequence(&quiet(8)).unwrap();
        let gt = seq.gt.as_ref().unwrap();
        let scale = AnisoScale(Vec3::from(gt.object_scale));
        let sdf = build_sdf(&seq.mesh.map_vertices(|v| scale.apply(v)), 64).unwrap();
        for i in [0, 2, 7] {
            let pose = pose_of(&seq, i);
            let t = Vec3::from(gt.frame(i).unwrap().hand_t);
            let near = seq.frames[i]
                .hand
                .camera_vertices(gt.hand_scale, &t)
                .iter()
                .filter(|v| sdf.query(&to_object_frame(&pose, v)).abs() < 2e-3)
                .count();
            assert!(near >= 5, "frame {i}: {near} vertices in contact");
        }
    }

    #[test]
    fn keypoints_are_projected_joints() {
        let seq = generate_sequence(&quiet(4)).unwrap();
        let gt = seq.gt.as_ref().unwrap();
        let k = seq.meta.intrinsics;
        for (f, g) in seq.frames.iter().zip(&gt.frames) {
            let t = Vec3::from(g.hand_t);
            for (j, uv) in f.hand.joints3d.iter().zip(&f.hand.joints2d) {
                let p = k.project(&(j * gt.hand_scale + t)).unwrap();
                assert!((p - uv).norm() < 1e-9);
            }
            // the wrist is the hand origin
            assert!(f.hand.joints3d[0].norm() < 1e-12);
        }
    }

    #[test]
    fn oracle_similarity_peaks_at_visible_vertices() {
        let mesh = primitives::subdivided_box(Vec3::new(0.05, 0.04, 0.06), 4);
        let cfg = SynthConfig::default();
        let k = cfg.intrinsics();
        let pose = RigidPose::new(UnitQuaternion::from_euler_angles(-0.3, 0.45, 0.08), Vec3::new(0.0, 0.0, 0.45));
        let scale = AnisoScale::isotropic(0.8);
        let (grid, desc) = feature_oracle(&mesh, &pose, &scale, &k, 1, 16, 11).unwrap();
        let cam: Vec<Vec3> = mesh.vertices().iter().map(|v| pose.transform(&scale.apply(v))).collect();
        let render = render_silhouette(&mesh, &pose, &scale, &k, 1.0);
        let classes = classify_points(&cam, &render, &BinaryMask::zeros(k.width, k.height), &k, 1e-3).unwrap();
        let mut checked = 0;
        for ((p, c), d) in cam.iter().zip(&classes).zip(&desc) {
            if *c != PointClass::Visible {
                continue;
            }
            let uv = k.project(p).unwrap();
            let (u, v) = (uv.x.round() as usize, uv.y.round() as usize);
            // vertices on the silhouette may land on a background pixel
            let interior = (v - 1..=v + 1).all(|y| (u - 1..=u + 1).all(|x| render.depth_at(x, y).is_finite()));
            if !interior {
                continue;
            }
            let sim: f64 = grid.cell(v, u).iter().zip(d).map(|(a, b)| a * b).sum();
            assert!(sim > 0.99, "vertex at {uv:?}: similarity {sim}");
            checked += 1;
        }
        assert!(checked > 20);
        let bg = grid.cell(0, 0);
        assert!(bg.iter().all(|x| *x == 0.0));
        assert_eq!(bg.iter().zip(&desc[0]).map(|(a, b)| a * b).sum::<f64>(), 0.0);
    }

    #[test]
    fn random_descriptors_are_nearly_orthogonal() {
        let d = vertex_descriptors(20_000, 16, 5);
        let close = d
            .chunks(2)
            .filter(|p| p[0].iter().zip(&p[1]).map(|(a, b)| a * b).sum::<f64>().abs() >= 0.8)
            .count();
        // 10⁴ pairs; at 16 channels |cos| ≥ 0.8 has probability ~1e-5
        assert!(close < 100, "{close} of 10000 pairs");
        assert!(d.iter().all(|v| (v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn hard_masks_agree_with_the_rasterizer() {
        let cfg = quiet(6);
        let seq = generate_sequence(&cfg).unwrap();
        let k = seq.meta.intrinsics;
        let scale = AnisoScale(Vec3::from(cfg.object_scale));
        let lat = Lattice::pixels(&k);
        for i in [0, 5] {
            let pose = pose_of(&seq, i);
            let cam: Vec<Vec3> = seq.mesh.vertices().iter().map(|v| pose.transform(&scale.apply(v))).collect();
            let hits = zbuffer(&cam, seq.mesh.faces(), &k, &lat);
            let bits = hits.iter().map(|h| u8::from(h.is_some())).collect();
            let synth = BinaryMask::new(k.width, k.height, bits).unwrap();
            let iou = render_silhouette(&seq.mesh, &pose, &scale, &k, 1.0).iou(&synth).unwrap();
            assert!(iou >= 0.98, "frame {i}: IoU {iou}");
        }
    }

    #[test]
    fn noiseless_depth_is_consistent_with_the_true_scale() {
        let cfg = quiet(3);
        let seq = generate_sequence(&cfg).unwrap();
        let k = seq.meta.intrinsics;
        let f = &seq.frames[0];
        let pose = pose_of(&seq, 0);
        let scale = AnisoScale(Vec3::from(cfg.object_scale));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<Vec3> = seq.mesh.sample_surface(30_000, &mut rng).into_iter().map(|s| s.point).collect();
        let cam: Vec<Vec3> = samples.iter().map(|p| pose.transform(&scale.apply(p))).collect();
        let render = render_silhouette(&seq.mesh, &pose, &scale, &k, 1.0);
        let classes = classify_points(&cam, &render, &f.mask_hand, &k, 2e-3).unwrap();
        let visible: Vec<Vec3> = samples
            .iter()
            .zip(&classes)
            .filter(|(_, c)| **c == PointClass::Visible)
            .map(|(p, _)| *p)
            .collect();
        let target = unproject_masked(&f.depth, &f.mask_obj, &k).unwrap();
        // the true placement is (nearly) a fixed point of the registration
        let init = IcpInit { scale: cfg.object_scale[0], translation: pose.translation };
        let fit = trimmed_icp_scale(&visible, target.points(), &pose.rotation, 0.8, 300, Some(init)).unwrap();
        assert!((fit.scale / cfg.object_scale[0] - 1.0).abs() < 5e-3, "scale {}", fit.scale);
    }

    #[test]
    fn initialization_recovers_both_scales() {
        let cfg = SynthConfig { frames: 12, onset_frame: 10, ..quiet(12) };
        let seq = generate_sequence(&cfg).unwrap();
        let tcfg = TrackerConfig { onset_noise_rot_deg: 0.0, onset_noise_trans_mm: 0.0, ..TrackerConfig::default() };
        let (init, _) = initialize(&seq, &tcfg, None, seq.gt.as_ref()).unwrap();
        assert_eq!(init.iof_raw, 10);
        assert_eq!(init.iof_index, 10);
        // blind nearest-neighbour registration of a partial scan settles slightly small;
        // the onset optimization refines the object scale
        assert!((init.object_scale / cfg.object_scale[0] - 1.0).abs() < 0.025, "object scale {}", init.object_scale);
        assert!((init.hand_scale / cfg.hand_scale - 1.0).abs() < 5e-3, "hand scale {}", init.hand_scale);
    }

    #[test]
    fn same_seed_same_sequence() {
        let cfg = SynthConfig {
            frames: 4,
            onset_frame: 1,
            depth_noise_mm: 1.0,
            mask_flip_rate: 0.001,
            ..SynthConfig::default()
        };
        assert_eq!(generate_sequence(&cfg).unwrap(), generate_sequence(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_sequence(&cfg).unwrap().frames, generate_sequence(&other).unwrap().frames);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            SynthConfig { frames: 0, ..SynthConfig::default() },
            SynthConfig { rot_deg_per_frame: -1.0, ..SynthConfig::default() },
            SynthConfig { mask_flip_rate: 1.5, ..SynthConfig::default() },
            SynthConfig { keypoint_noise_px: f64::NAN, ..SynthConfig::default() },
            SynthConfig { object_scale: [0.8, 0.0, 0.8], ..SynthConfig::default() },
        ] {
            assert!(matches!(generate_sequence(&cfg), Err(Error::InvalidConfig(_))), "{cfg:?}");
        }
    }
}
