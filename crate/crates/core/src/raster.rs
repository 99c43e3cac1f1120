//! Soft silhouette and depth rendering of a posed mesh.
//!
//! Alpha is a logistic function of the signed pixel distance to the projected silhouette
//! boundary: positive inside the coverage of any projected triangle, negative outside.
//! Boundary segments are the projections of contour edges (edges shared by a front- and a
//! back-facing triangle, or open edges). Distances are only resolved inside a band around
//! those segments; beyond it alpha is constant and numerically saturated.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::{AnisoScale, BinaryMask, CameraIntrinsics, RigidPose, TriMesh, Vec2, Vec3};

pub const DEFAULT_SHARPNESS: f64 = 1.0;
pub const DEFAULT_DEPTH_EPS: f64 = 0.005;
pub const DEFAULT_MAX_RENDER_SIDE: usize = 160;

const NEAR: f64 = 1e-6;
/// Band half-width in units of `1 / sharpness`.
const BAND_SCALE: f64 = 12.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteRender {
    pub width: usize,
    pub height: usize,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
}

impl SilhouetteRender {
    pub fn alpha_at(&self, u: usize, v: usize) -> f64 {
        self.alpha[v * self.width + u]
    }

    pub fn depth_at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }

    pub fn hard_mask(&self) -> BinaryMask {
        let bits = self.alpha.iter().map(|&a| u8::from(a > 0.5)).collect();
        BinaryMask::new(self.width, self.height, bits).expect("render dims are consistent")
    }

    /// IoU of `alpha > 0.5` against a binary mask of the same size.
    pub fn iou(&self, mask: &BinaryMask) -> Result<f64> {
        if mask.dims() != (self.width, self.height) {
            return Err(Error::DimensionMismatch(format!(
                "render {}x{} vs mask {:?}",
                self.width,
                self.height,
                mask.dims()
            )));
        }
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, &m) in self.alpha.iter().zip(mask.bits()) {
            let r = *a > 0.5;
            let m = m != 0;
            inter += usize::from(r && m);
            union += usize::from(r || m);
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }
}

/// Mesh with precomputed edge adjacency, reusable across many renders.
pub struct SilhouetteRenderer<'a> {
    mesh: &'a TriMesh,
    /// (v0, v1, face_a, face_b or usize::MAX for open edges)
    edges: Vec<(usize, usize, usize, usize)>,
}

impl<'a> SilhouetteRenderer<'a> {
    pub fn new(mesh: &'a TriMesh) -> Self {
        let mut map: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (f, face) in mesh.faces().iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (face[k], face[(k + 1) % 3]);
                map.entry((a.min(b), a.max(b))).or_default().push(f);
            }
        }
        let mut edges: Vec<_> = map
            .into_iter()
            .flat_map(|((a, b), faces)| {
                // non-manifold edges are split into open edges
                if faces.len() == 2 {
                    vec![(a, b, faces[0], faces[1])]
                } else {
                    faces.into_iter().map(|f| (a, b, f, usize::MAX)).collect()
                }
            })
            .collect();
        edges.sort_unstable();
        Self { mesh, edges }
    }

    pub fn render(
        &self,
        pose: &RigidPose,
        scale: &AnisoScale,
        k: &CameraIntrinsics,
        sharpness: f64,
    ) -> SilhouetteRender {
        let (w, h) = (k.width, k.height);
        let band = (BAND_SCALE / sharpness).max(1.0);
        let cam: Vec<Vec3> = self
            .mesh
            .vertices()
            .iter()
            .map(|v| pose.transform(&scale.apply(v)))
            .collect();
        let uv: Vec<Option<Vec2>> = cam
            .iter()
            .map(|p| (p.z > NEAR).then(|| k.project_unchecked(p)))
            .collect();

        // 2D orientation per face: <0 front-facing, >0 back-facing, None if not projectable
        let orient: Vec<Option<f64>> = self
            .mesh
            .faces()
            .iter()
            .map(|f| {
                let (a, b, c) = (uv[f[0]]?, uv[f[1]]?, uv[f[2]]?);
                Some(cross2(&(b - a), &(c - a)))
            })
            .collect();

        let mut depth = vec![f64::INFINITY; w * h];
        let mut covered = vec![false; w * h];
        for (f, face) in self.mesh.faces().iter().enumerate() {
            let Some(area) = orient[f] else { continue };
            if area.abs() < 1e-12 {
                continue;
            }
            let pts = face.map(|i| uv[i].expect("oriented faces are projectable"));
            let inv_z = face.map(|i| 1.0 / cam[i].z);
            let Some((u0, u1, v0, v1)) = pixel_bbox(&pts, 0.0, w, h) else {
                continue;
            };
            for v in v0..=v1 {
                for u in u0..=u1 {
                    let p = Vec2::new(u as f64, v as f64);
                    let b0 = cross2(&(pts[2] - pts[1]), &(p - pts[1])) / area;
                    let b1 = cross2(&(pts[0] - pts[2]), &(p - pts[2])) / area;
                    let b2 = 1.0 - b0 - b1;
                    if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                        continue;
                    }
                    let id = v * w + u;
                    covered[id] = true;
                    let z = 1.0 / (b0 * inv_z[0] + b1 * inv_z[1] + b2 * inv_z[2]);
                    if z < depth[id] {
                        depth[id] = z;
                    }
                }
            }
        }

        let mut dist = vec![band; w * h];
        for &(a, b, fa, fb) in &self.edges {
            let (Some(pa), Some(pb)) = (uv[a], uv[b]) else {
                continue;
            };
            let is_contour = match (orient[fa], fb) {
                (None, _) => false,
                (Some(_), usize::MAX) => true,
                (Some(oa), fb) => match orient[fb] {
                    None => true,
                    Some(ob) => (oa < 0.0) != (ob < 0.0),
                },
            };
            if !is_contour {
                continue;
            }
            let Some((u0, u1, v0, v1)) = pixel_bbox(&[pa, pb], band, w, h) else {
                continue;
            };
            let seg = pb - pa;
            let len2 = seg.norm_squared();
            for v in v0..=v1 {
                for u in u0..=u1 {
                    let p = Vec2::new(u as f64, v as f64);
                    let t = if len2 > 0.0 {
                        ((p - pa).dot(&seg) / len2).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let d = (p - pa - seg * t).norm();
                    let id = v * w + u;
                    if d < dist[id] {
                        dist[id] = d;
                    }
                }
            }
        }

        let alpha = dist
            .iter()
            .zip(&covered)
            .map(|(&d, &c)| sigmoid(sharpness * if c { d } else { -d }))
            .collect();
        SilhouetteRender {
            width: w,
            height: h,
            alpha,
            depth,
        }
    }
}

pub fn render_silhouette(
    mesh: &TriMesh,
    pose: &RigidPose,
    scale: &AnisoScale,
    k: &CameraIntrinsics,
    sharpness: f64,
) -> SilhouetteRender {
    SilhouetteRenderer::new(mesh).render(pose, scale, k, sharpness)
}

/// Hard z-buffered rasterization at pixel centers: coverage and nearest depth.
pub fn rasterize_hard(
    mesh: &TriMesh,
    pose: &RigidPose,
    scale: &AnisoScale,
    k: &CameraIntrinsics,
) -> (BinaryMask, Vec<f64>) {
    let r = SilhouetteRenderer::new(mesh).render(pose, scale, k, 1.0);
    let bits = r.depth.iter().map(|d| u8::from(d.is_finite())).collect();
    (
        BinaryMask::new(k.width, k.height, bits).expect("render dims are consistent"),
        r.depth,
    )
}

/// Front-most surface point under every pixel center, in the mesh's own (unposed,
/// unscaled) frame; `None` where no triangle covers the pixel. Weights are perspective
/// correct, so the point reprojects onto its pixel exactly.
pub fn surface_points(mesh: &TriMesh, pose: &RigidPose, scale: &AnisoScale, k: &CameraIntrinsics) -> Vec<Option<Vec3>> {
    let (w, h) = (k.width, k.height);
    let verts = mesh.vertices();
    let cam: Vec<Vec3> = verts.iter().map(|v| pose.transform(&scale.apply(v))).collect();
    let mut depth = vec![f64::INFINITY; w * h];
    let mut out = vec![None; w * h];
    for face in mesh.faces() {
        if face.iter().any(|&i| cam[i].z <= NEAR) {
            continue;
        }
        let pts = face.map(|i| k.project_unchecked(&cam[i]));
        let area = cross2(&(pts[1] - pts[0]), &(pts[2] - pts[0]));
        if area.abs() < 1e-12 {
            continue;
        }
        let inv_z = face.map(|i| 1.0 / cam[i].z);
        let Some((u0, u1, v0, v1)) = pixel_bbox(&pts, 0.0, w, h) else {
            continue;
        };
        for v in v0..=v1 {
            for u in u0..=u1 {
                let p = Vec2::new(u as f64, v as f64);
                let b0 = cross2(&(pts[2] - pts[1]), &(p - pts[1])) / area;
                let b1 = cross2(&(pts[0] - pts[2]), &(p - pts[2])) / area;
                let b = [b0, b1, 1.0 - b0 - b1];
                if b.iter().any(|x| *x < 0.0) {
                    continue;
                }
                let wz = [b[0] * inv_z[0], b[1] * inv_z[1], b[2] * inv_z[2]];
                let sum = wz[0] + wz[1] + wz[2];
                let z = 1.0 / sum;
                let id = v * w + u;
                if z < depth[id] {
                    depth[id] = z;
                    out[id] = Some((0..3).map(|i| verts[face[i]] * (wz[i] / sum)).sum());
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointClass {
    Visible,
    SelfOccluded,
    HandOccluded,
    /// Visible, but too close to the observed silhouette or hand edge for its feature
    /// lookup to be clean. Never produced by [`classify_points`].
    NearBoundary,
}

/// Visibility of camera-frame points against a render and the hand mask (same resolution).
pub fn classify_points(
    points_cam: &[Vec3],
    render: &SilhouetteRender,
    hand_mask: &BinaryMask,
    k: &CameraIntrinsics,
    depth_eps: f64,
) -> Result<Vec<PointClass>> {
    if (k.width, k.height) != (render.width, render.height)
        || hand_mask.dims() != (render.width, render.height)
    {
        return Err(Error::DimensionMismatch(format!(
            "camera {}x{}, render {}x{}, hand mask {:?}",
            k.width,
            k.height,
            render.width,
            render.height,
            hand_mask.dims()
        )));
    }
    Ok(points_cam
        .iter()
        .map(|p| {
            if p.z <= NEAR {
                return PointClass::SelfOccluded;
            }
            let uv = k.project_unchecked(p);
            let Some((u, v)) = k.pixel_of(&uv) else {
                return PointClass::SelfOccluded;
            };
            if p.z > render.depth_at(u, v) + depth_eps {
                PointClass::SelfOccluded
            } else if hand_mask.get(u, v) {
                PointClass::HandOccluded
            } else {
                PointClass::Visible
            }
        })
        .collect())
}

#[inline]
fn cross2(a: &Vec2, b: &Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn pixel_bbox(pts: &[Vec2], pad: f64, w: usize, h: usize) -> Option<(usize, usize, usize, usize)> {
    let (mut lo, mut hi) = (pts[0], pts[0]);
    for p in &pts[1..] {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let u0 = (lo.x - pad).ceil().max(0.0);
    let v0 = (lo.y - pad).ceil().max(0.0);
    let u1 = (hi.x + pad).floor().min(w as f64 - 1.0);
    let v1 = (hi.y + pad).floor().min(h as f64 - 1.0);
    if u0 > u1 || v0 > v1 {
        return None;
    }
    Some((u0 as usize, u1 as usize, v0 as usize, v1 as usize))
}
