use super::{CameraIntrinsics, PointCloud, Vec2, Vec3};
use crate::error::{Error, Result};
use nalgebra::UnitQuaternion;

pub const NUM_JOINTS: usize = 21;

/// Per-pixel metric depth; `0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "depth has {} values for {width}x{height}",
                values.len()
            )));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NonFiniteValue("depth (must be finite and >= 0)".into()));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.values[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, d: f32) {
        self.values[v * self.width + u] = d;
    }
}

/// Binary image stored one byte per pixel (0 or 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    /// Any non-zero byte is read as 1.
    pub fn new(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} values for {width}x{height}",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits: bits.into_iter().map(|b| u8::from(b != 0)).collect(),
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[v * self.width + u] != 0
    }

    pub fn set(&mut self, u: usize, v: usize, on: bool) {
        self.bits[v * self.width + u] = u8::from(on);
    }

    /// Mask value at the nearest pixel; `false` outside the image.
    pub fn at(&self, uv: &Vec2) -> bool {
        let (u, v) = ((uv.x + 0.5).floor(), (uv.y + 0.5).floor());
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return false;
        }
        self.get(u as usize, v as usize)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn and_not_count(&self, other: &BinaryMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a != 0 && **b == 0)
            .count()
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a != 0 && **b != 0)
            .count()
    }

    /// Smallest distance (in pixels) from any set pixel to the image edge, `None` if empty.
    pub fn border_distance(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for v in 0..self.height {
            for u in 0..self.width {
                if self.get(u, v) {
                    let d = u.min(v).min(self.width - 1 - u).min(self.height - 1 - v);
                    best = Some(best.map_or(d, |b| b.min(d)));
                }
            }
        }
        best
    }

    /// Block-majority resampling onto `factor × factor` blocks, centered like
    /// [`CameraIntrinsics::downsampled`]. Exact ties alternate in a checkerboard so the
    /// mask neither grows nor shrinks on average; blocks cut by the image border vote
    /// over their in-image pixels.
    pub fn downsampled(&self, factor: usize) -> Self {
        self.reduce_blocks(factor, |u, v, on, n| 2 * on > n || (2 * on == n && (u + v) % 2 == 0))
    }

    /// Block resampling that keeps a low-resolution pixel if any pixel of its block is set.
    /// Suited to masks of pixels to ignore, where erring on the large side is safe.
    pub fn downsampled_any(&self, factor: usize) -> Self {
        self.reduce_blocks(factor, |_, _, on, _| on > 0)
    }

    fn reduce_blocks(&self, factor: usize, keep: impl Fn(usize, usize, usize, usize) -> bool) -> Self {
        if factor <= 1 {
            return self.clone();
        }
        let (w, h) = (self.width.div_ceil(factor), self.height.div_ceil(factor));
        let mut out = Self::zeros(w, h);
        for v in 0..h {
            for u in 0..w {
                let (mut on, mut n) = (0usize, 0usize);
                for sv in v * factor..((v + 1) * factor).min(self.height) {
                    for su in u * factor..((u + 1) * factor).min(self.width) {
                        on += usize::from(self.get(su, sv));
                        n += 1;
                    }
                }
                out.set(u, v, keep(u, v, on, n));
            }
        }
        out
    }
}

/// Lifts every masked pixel with valid depth to a camera-frame point.
pub fn unproject_masked(
    depth: &DepthMap,
    mask: &BinaryMask,
    k: &CameraIntrinsics,
) -> Result<PointCloud> {
    if depth.width != mask.width || depth.height != mask.height {
        return Err(Error::DimensionMismatch(format!(
            "depth {}x{} vs mask {}x{}",
            depth.width, depth.height, mask.width, mask.height
        )));
    }
    let mut points = Vec::new();
    for v in 0..mask.height {
        for u in 0..mask.width {
            if !mask.get(u, v) {
                continue;
            }
            let d = depth.get(u, v) as f64;
            if d > 0.0 {
                points.push(k.unproject(u as f64, v as f64, d));
            }
        }
    }
    PointCloud::new(points)
}

/// Per-frame hand estimator output. Vertices and joints are rotated into the camera
/// orientation but carry neither the metric scale nor the translation:
/// camera-frame position is `s_h · v + T_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct HandFrameObservation {
    pub vertices: Vec<Vec3>,
    pub joints3d: Vec<Vec3>,
    pub joints2d: Vec<Vec2>,
    pub rotation: UnitQuaternion<f64>,
}

impl HandFrameObservation {
    pub fn new(
        vertices: Vec<Vec3>,
        joints3d: Vec<Vec3>,
        joints2d: Vec<Vec2>,
        rotation: UnitQuaternion<f64>,
    ) -> Result<Self> {
        if joints3d.len() != NUM_JOINTS || joints2d.len() != NUM_JOINTS {
            return Err(Error::LengthMismatch {
                expected: NUM_JOINTS,
                actual: joints3d.len().min(joints2d.len()),
            });
        }
        Ok(Self {
            vertices,
            joints3d,
            joints2d,
            rotation,
        })
    }

    pub fn camera_vertices(&self, scale: f64, translation: &Vec3) -> Vec<Vec3> {
        self.vertices.iter().map(|v| v * scale + translation).collect()
    }

    pub fn camera_joints(&self, scale: f64, translation: &Vec3) -> Vec<Vec3> {
        self.joints3d.iter().map(|j| j * scale + translation).collect()
    }
}
