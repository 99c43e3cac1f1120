//! Objective terms for hand and object tracking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, CameraIntrinsics, MeshSample, RigidPose, TriMesh, Vec2, Vec3};
use crate::raster::{PointClass, SilhouetteRender};
use crate::sdf::{gate, SdfGrid};

pub const DEFAULT_ATTRACT_BAND: f64 = 0.01;
pub const DEFAULT_PENETRATION_WEIGHT: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_mask: f64,
    pub w_dino: f64,
    pub w_interact: f64,
    pub w_contact: f64,
    pub interact_max_dist: f64,
}

impl LossWeights {
    /// Weights used for HO3D-style sequences.
    pub fn ho3d() -> Self {
        Self {
            w_mask: 5.0,
            w_dino: 10.0,
            w_interact: 400.0,
            w_contact: 5.0,
            interact_max_dist: 0.05,
        }
    }

    /// Same as [`LossWeights::ho3d`] with the interaction weight halved.
    pub fn dexycb() -> Self {
        Self {
            w_interact: 200.0,
            ..Self::ho3d()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_mask,
            self.w_dino,
            self.w_interact,
            self.w_contact,
            self.interact_max_dist,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::ho3d()
    }
}

/// Per-term values of the object objective (unweighted).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub mask: f64,
    pub dino: f64,
    pub interact: f64,
    pub contact: f64,
}

/// Weighted sum; the contact term only participates at the onset frame.
pub fn composite_object_loss(terms: &LossTerms, weights: &LossWeights, onset: bool) -> f64 {
    let mut total = weights.w_mask * terms.mask + weights.w_dino * terms.dino + weights.w_interact * terms.interact;
    if onset {
        total += weights.w_contact * terms.contact;
    }
    total
}

// ---------------------------------------------------------------------------
// joint reprojection

/// Mean squared pixel error of camera-frame joints against 2D keypoints, and its
/// gradient with respect to a translation shared by all joints.
///
/// Keypoints with non-finite coordinates are treated as missing.
pub fn joint_reproj_loss(joints_cam: &[Vec3], joints2d: &[Vec2], k: &CameraIntrinsics) -> Result<(f64, Vec3)> {
    if joints_cam.len() != joints2d.len() {
        return Err(Error::LengthMismatch {
            expected: joints_cam.len(),
            actual: joints2d.len(),
        });
    }
    let mut loss = 0.0;
    let mut grad = Vec3::zeros();
    let mut n = 0usize;
    for (p, x) in joints_cam.iter().zip(joints2d) {
        if !(x.x.is_finite() && x.y.is_finite()) {
            continue;
        }
        let r = k.project(p)? - x;
        loss += r.norm_squared();
        grad += k.project_jacobian(p).transpose() * r * 2.0;
        n += 1;
    }
    if n == 0 {
        return Err(Error::DegenerateKeypoints);
    }
    Ok((loss / n as f64, grad / n as f64))
}

// ---------------------------------------------------------------------------
// mask alignment

fn check_dims(render: &SilhouetteRender, mask: &BinaryMask) -> Result<()> {
    if mask.dims() != (render.width, render.height) {
        return Err(Error::DimensionMismatch(format!(
            "render {}x{} vs mask {:?}",
            render.width,
            render.height,
            mask.dims()
        )));
    }
    Ok(())
}

/// Mean over pixels of `(alpha − gt)²`.
pub fn mask_loss(render: &SilhouetteRender, gt: &BinaryMask) -> Result<f64> {
    check_dims(render, gt)?;
    let sum: f64 = render
        .alpha
        .iter()
        .zip(gt.bits())
        .map(|(a, &m)| (a - f64::from(m)).powi(2))
        .sum();
    Ok(sum / render.alpha.len().max(1) as f64)
}

/// [`mask_loss`] with pixels under `ignore` dropped from the sum (still normalized by the
/// full pixel count). Used with the hand mask so the occluding hand does not read as
/// missing object.
pub fn mask_loss_ignoring(render: &SilhouetteRender, gt: &BinaryMask, ignore: &BinaryMask) -> Result<f64> {
    check_dims(render, gt)?;
    check_dims(render, ignore)?;
    let sum: f64 = render
        .alpha
        .iter()
        .zip(gt.bits())
        .zip(ignore.bits())
        .filter(|(_, &h)| h == 0)
        .map(|((a, &m), _)| (a - f64::from(m)).powi(2))
        .sum();
    Ok(sum / render.alpha.len().max(1) as f64)
}

// ---------------------------------------------------------------------------
// semantic features

/// Dense per-cell descriptors, unit length or exactly zero (background).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    hf: usize,
    wf: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureGrid {
    /// Builds a grid from row-major `(hf, wf, channels)` values, normalizing every cell.
    pub fn new(hf: usize, wf: usize, channels: usize, mut values: Vec<f64>) -> Result<Self> {
        if hf == 0 || wf == 0 || channels == 0 {
            return Err(Error::DimensionMismatch(format!("empty feature grid {hf}x{wf}x{channels}")));
        }
        if values.len() != hf * wf * channels {
            return Err(Error::LengthMismatch {
                expected: hf * wf * channels,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("feature grid".into()));
        }
        for cell in values.chunks_mut(channels) {
            normalize_or_zero(cell);
        }
        Ok(Self {
            hf,
            wf,
            channels,
            values,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.hf, self.wf)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.wf + col) * self.channels;
        &self.values[o..o + self.channels]
    }

    /// Cosine similarity of every cell with a unit descriptor.
    pub fn similarity_map(&self, descriptor: &[f64]) -> SimilarityMap {
        let values = self
            .values
            .chunks(self.channels)
            .map(|c| c.iter().zip(descriptor).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0))
            .collect();
        SimilarityMap {
            hf: self.hf,
            wf: self.wf,
            values,
        }
    }

    /// Bilinearly interpolated, re-normalized descriptor at an image-space location.
    pub fn sample_descriptor(&self, uv: &Vec2, image_w: usize, image_h: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        for (row, col, w) in bilinear_taps(uv, image_w, image_h, self.wf, self.hf) {
            for (o, v) in out.iter_mut().zip(self.cell(row, col)) {
                *o += w * v;
            }
        }
        normalize_or_zero(&mut out);
        out
    }
}

/// Per-sample similarity over the feature grid, values in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    hf: usize,
    wf: usize,
    values: Vec<f64>,
}

impl SimilarityMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.wf + col]
    }

    /// Bilinear lookup at an image pixel; cells beyond the grid read as zero.
    pub fn sample(&self, uv: &Vec2, image_w: usize, image_h: usize) -> f64 {
        bilinear_taps(uv, image_w, image_h, self.wf, self.hf)
            .map(|(r, c, w)| w * self.get(r, c))
            .sum()
    }
}

/// Grid cell centers sit at the centers of the image blocks they cover.
fn bilinear_taps(
    uv: &Vec2,
    image_w: usize,
    image_h: usize,
    wf: usize,
    hf: usize,
) -> impl Iterator<Item = (usize, usize, f64)> {
    let gx = (uv.x + 0.5) * wf as f64 / image_w as f64 - 0.5;
    let gy = (uv.y + 0.5) * hf as f64 / image_h as f64 - 0.5;
    let (x0, y0) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - x0, gy - y0);
    let finite = gx.is_finite() && gy.is_finite();
    [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
        .into_iter()
        .filter_map(move |(dx, dy): (f64, f64)| {
            if !finite {
                return None;
            }
            let (x, y) = (x0 + dx, y0 + dy);
            let w = (if dx == 0.0 { 1.0 - fx } else { fx }) * (if dy == 0.0 { 1.0 - fy } else { fy });
            (x >= 0.0 && y >= 0.0 && x < wf as f64 && y < hf as f64 && w > 0.0).then(|| (y as usize, x as usize, w))
        })
}

fn normalize_or_zero(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Canonical surface points with reference descriptors and their current similarity maps.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalSamples {
    pub points: Vec<Vec3>,
    pub descriptors: Vec<Vec<f64>>,
    pub similarity_maps: Vec<SimilarityMap>,
}

impl CanonicalSamples {
    pub fn new(points: Vec<Vec3>, mut descriptors: Vec<Vec<f64>>) -> Result<Self> {
        if points.len() != descriptors.len() {
            return Err(Error::LengthMismatch {
                expected: points.len(),
                actual: descriptors.len(),
            });
        }
        for d in &mut descriptors {
            normalize_or_zero(d);
        }
        Ok(Self {
            points,
            descriptors,
            similarity_maps: Vec::new(),
        })
    }

    /// Descriptors interpolated from per-vertex descriptors of the canonical mesh.
    pub fn from_vertex_descriptors(mesh: &TriMesh, samples: &[MeshSample], vertex_desc: &[Vec<f64>]) -> Result<Self> {
        if vertex_desc.len() != mesh.vertices().len() {
            return Err(Error::LengthMismatch {
                expected: mesh.vertices().len(),
                actual: vertex_desc.len(),
            });
        }
        let descriptors = samples
            .iter()
            .map(|s| {
                let f = mesh.faces()[s.face];
                let c = vertex_desc[f[0]].len();
                (0..c)
                    .map(|j| s.bary.iter().zip(f).map(|(b, vi)| b * vertex_desc[vi][j]).sum())
                    .collect()
            })
            .collect();
        Self::new(samples.iter().map(|s| s.point).collect(), descriptors)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Recomputes every similarity map against a frame's feature grid.
    pub fn update_similarity(&mut self, grid: &FeatureGrid) -> Result<()> {
        if let Some(d) = self.descriptors.iter().find(|d| d.len() != grid.channels()) {
            return Err(Error::DimensionMismatch(format!(
                "descriptor has {} channels, grid {}",
                d.len(),
                grid.channels()
            )));
        }
        self.similarity_maps = self.descriptors.iter().map(|d| grid.similarity_map(d)).collect();
        Ok(())
    }
}

/// Negative mean similarity of the visible samples at their projections under `pose`.
///
/// `visibility` comes from [`crate::raster::classify_points`]; hand-occluded and
/// self-occluded samples are excluded. Returns 0 when nothing is visible or no similarity
/// maps are loaded.
pub fn dino_loss(
    samples: &CanonicalSamples,
    pose: &RigidPose,
    scale: &crate::geometry::AnisoScale,
    k: &CameraIntrinsics,
    visibility: &[PointClass],
) -> Result<f64> {
    if samples.similarity_maps.len() != samples.len() {
        return Ok(0.0);
    }
    if visibility.len() != samples.len() {
        return Err(Error::LengthMismatch {
            expected: samples.len(),
            actual: visibility.len(),
        });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, map), class) in samples.points.iter().zip(&samples.similarity_maps).zip(visibility) {
        if *class != PointClass::Visible {
            continue;
        }
        let c = pose.transform(&scale.apply(p));
        n += 1;
        if c.z > 1e-9 {
            sum += map.sample(&k.project_unchecked(&c), k.width, k.height);
        }
    }
    Ok(if n == 0 { 0.0 } else { -sum / n as f64 })
}

// ---------------------------------------------------------------------------
// interaction stability

/// Object-frame hand vertices of the preceding processed frame, with their signed
/// distances and gating weights (held constant while the current frame is optimized).
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionAnchor {
    pub local: Vec<Vec3>,
    pub phi: Vec<f64>,
    pub weights: Vec<f64>,
}

impl InteractionAnchor {
    pub fn new(local: Vec<Vec3>, phi: Vec<f64>, sigma: f64) -> Result<Self> {
        if local.len() != phi.len() {
            return Err(Error::LengthMismatch {
                expected: local.len(),
                actual: phi.len(),
            });
        }
        let weights = phi.iter().map(|&d| gate(d, sigma)).collect();
        Ok(Self { local, phi, weights })
    }

    pub fn from_sdf(local: Vec<Vec3>, sdf: &SdfGrid, sigma: f64) -> Self {
        let phi = local.iter().map(|p| sdf.query(p)).collect();
        Self::new(local, phi, sigma).expect("lengths agree")
    }

    /// Number of vertices that participate under `max_dist`.
    pub fn active_count(&self, max_dist: f64) -> usize {
        self.phi.iter().filter(|&&d| d <= max_dist).count()
    }
}

/// Gradient of the interaction term. The rotation component is with respect to a left
/// tangent increment `R ← exp(δ)·R`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct InteractGrad {
    pub object_rotation: Vec3,
    pub object_translation: Vec3,
    pub hand_translation: Vec3,
}

/// `(1/N)·Σ wᵢ‖Rᵀ(vᵢ − T) − ṽᵢ‖` over camera-frame hand vertices `vᵢ`; vertices whose
/// previous distance exceeds `max_dist` contribute nothing.
pub fn interact_loss(
    hand_verts: &[Vec3],
    pose: &RigidPose,
    anchor: &InteractionAnchor,
    max_dist: f64,
) -> Result<(f64, InteractGrad)> {
    if hand_verts.len() != anchor.local.len() {
        return Err(Error::LengthMismatch {
            expected: anchor.local.len(),
            actual: hand_verts.len(),
        });
    }
    let n = hand_verts.len();
    if n == 0 {
        return Ok((0.0, InteractGrad::default()));
    }
    let rot = pose.rotation;
    let mut loss = 0.0;
    let mut g_rot = Vec3::zeros();
    let mut g_t = Vec3::zeros();
    for (i, v) in hand_verts.iter().enumerate() {
        if !(anchor.phi[i] <= max_dist) {
            continue;
        }
        let w = anchor.weights[i];
        let c = v - pose.translation;
        let e = rot.inverse_transform_vector(&c) - anchor.local[i];
        let len = e.norm();
        loss += w * len;
        if len > 0.0 {
            let m = rot * (e / len) * w;
            g_t += m;
            g_rot += m.cross(&c);
        }
    }
    let inv = 1.0 / n as f64;
    Ok((
        loss * inv,
        InteractGrad {
            object_rotation: g_rot * inv,
            object_translation: -g_t * inv,
            hand_translation: g_t * inv,
        },
    ))
}

// ---------------------------------------------------------------------------
// contact

/// Width (m) of the rounded bottom of the contact penalty.
pub const CONTACT_SMOOTHING: f64 = 5e-4;

/// `√(x² + δ²) − δ`: linear far from zero, quadratic within `δ`, so the gradient vanishes
/// at contact instead of flipping sign.
#[inline]
fn smooth_abs(x: f64) -> f64 {
    x.hypot(CONTACT_SMOOTHING) - CONTACT_SMOOTHING
}

/// Contact penalty from the signed distances `phi` of hand vertices to the object surface.
///
/// Attraction only pulls the `k` closest vertices onto the surface, each clipped at
/// `attract_band`, so a grasp touching the object at a few fingertips is not dragged into
/// it by the rest of the hand. Penetration depth `-φ` is penalized on every vertex with
/// weight `penetration_weight`. Both sums are divided by `k`, so a couple of penetrating
/// vertices weigh as much as the contact they fake.
pub fn contact_from_distances(phi: &[f64], k: usize, attract_band: f64, penetration_weight: f64) -> f64 {
    let k = k.min(phi.len());
    if k == 0 {
        return 0.0;
    }
    let pen = phi.iter().map(|p| penetration_weight * smooth_abs(p.min(0.0))).sum::<f64>();
    let mut sorted = phi.to_vec();
    sorted.select_nth_unstable_by(k - 1, f64::total_cmp);
    let attract = sorted[..k].iter().map(|p| smooth_abs(p.clamp(0.0, attract_band))).sum::<f64>();
    (pen + attract) / k as f64
}

/// [`contact_from_distances`] for object-frame points against a signed distance grid.
pub fn contact_loss(local_points: &[Vec3], sdf: &SdfGrid, k: usize, attract_band: f64, penetration_weight: f64) -> f64 {
    let phi: Vec<f64> = local_points.iter().map(|p| sdf.query(p)).collect();
    contact_from_distances(&phi, k, attract_band, penetration_weight)
}
