use nalgebra::Matrix2x3;
use serde::{Deserialize, Serialize};

use super::{Vec2, Vec3};
use crate::error::{Error, Result};

/// Depths at or below this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

/// Pinhole intrinsics. Pixel `(u, v)` has its center at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn project(&self, p: &Vec3) -> Result<Vec2> {
        if p.z <= MIN_DEPTH {
            return Err(Error::NonPositiveDepth(p.z));
        }
        Ok(self.project_unchecked(p))
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, p: &Vec3) -> Vec2 {
        Vec2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Derivative of the projection with respect to the 3D point.
    pub fn project_jacobian(&self, p: &Vec3) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }

    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        Vec3::new(
            depth * (u - self.cx) / self.fx,
            depth * (v - self.cy) / self.fy,
            depth,
        )
    }

    /// Integer downsampling factor that brings the longest side to at most `max_side` pixels.
    pub fn downsample_factor(&self, max_side: usize) -> usize {
        let longest = self.width.max(self.height);
        longest.div_ceil(max_side.max(1)).max(1)
    }

    /// Intrinsics of the image obtained by grouping `factor × factor` pixel blocks.
    ///
    /// Low-resolution pixel `j` covers full-resolution pixels `factor·j .. factor·j + factor − 1`,
    /// so its center sits at `factor·j + (factor − 1)/2`.
    pub fn downsampled(&self, factor: usize) -> Self {
        if factor <= 1 {
            return *self;
        }
        let f = factor as f64;
        let off = (f - 1.0) / 2.0;
        Self {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: (self.cx - off) / f,
            cy: (self.cy - off) / f,
            width: self.width.div_ceil(factor),
            height: self.height.div_ceil(factor),
        }
    }

    pub fn contains(&self, uv: &Vec2) -> bool {
        uv.x >= -0.5
            && uv.y >= -0.5
            && uv.x < self.width as f64 - 0.5
            && uv.y < self.height as f64 - 0.5
    }

    /// Nearest pixel of a continuous image coordinate, if inside the image.
    pub fn pixel_of(&self, uv: &Vec2) -> Option<(usize, usize)> {
        if !self.contains(uv) {
            return None;
        }
        let u = (uv.x + 0.5).floor() as usize;
        let v = (uv.y + 0.5).floor() as usize;
        Some((u.min(self.width - 1), v.min(self.height - 1)))
    }
}
