use nalgebra::{Matrix3, Quaternion, UnitQuaternion};

use super::Vec3;
use crate::error::{Error, Result};

/// Rigid transform `x ↦ R·x + T` with the rotation kept as a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// Builds a pose from a `(w, x, y, z)` quaternion, renormalizing it.
    pub fn from_wxyz(q: [f64; 4], t: [f64; 3]) -> Result<Self> {
        if q.iter().chain(t.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("pose".into()));
        }
        let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
        if raw.norm() < 1e-12 {
            return Err(Error::InvalidConfig("zero quaternion".into()));
        }
        Ok(Self::new(
            UnitQuaternion::from_quaternion(raw),
            Vec3::new(t[0], t[1], t[2]),
        ))
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn translation_array(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self::new(inv, -(inv * self.translation))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// Left-multiplies the rotation by `exp(delta)`; the translation is untouched.
    pub fn rotated_by(&self, delta: &Vec3) -> Self {
        let dq = UnitQuaternion::from_scaled_axis(*delta);
        Self::new(dq * self.rotation, self.translation)
    }

    pub fn is_finite(&self) -> bool {
        self.wxyz().iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }

    /// Geodesic angle between two rotations, in radians.
    pub fn rotation_angle_to(&self, other: &Self) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

/// Per-axis positive scale applied in the canonical frame before the rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnisoScale(pub Vec3);

impl Default for AnisoScale {
    fn default() -> Self {
        Self::unit()
    }
}

impl AnisoScale {
    pub fn new(sx: f64, sy: f64, sz: f64) -> Result<Self> {
        let s = Vec3::new(sx, sy, sz);
        if s.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(Self(s))
        } else {
            Err(Error::InvalidConfig(format!(
                "scale components must be positive, got {s:?}"
            )))
        }
    }

    pub fn unit() -> Self {
        Self(Vec3::repeat(1.0))
    }

    pub fn isotropic(s: f64) -> Self {
        Self(Vec3::repeat(s))
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.0.component_mul(p)
    }

    pub fn geometric_mean(&self) -> f64 {
        (self.0.x * self.0.y * self.0.z).cbrt()
    }

    pub fn log(&self) -> Vec3 {
        self.0.map(f64::ln)
    }

    pub fn from_log(l: &Vec3) -> Self {
        Self(l.map(f64::exp))
    }

    pub fn array(&self) -> [f64; 3] {
        [self.0.x, self.0.y, self.0.z]
    }
}

/// `R·(s ⊙ p) + T`.
pub fn apply_pose(pose: &RigidPose, scale: &AnisoScale, p: &Vec3) -> Vec3 {
    pose.transform(&scale.apply(p))
}

/// Maps a camera-frame point into the (metric, unscaled) object frame: `Rᵀ(v − T)`.
pub fn to_object_frame(pose: &RigidPose, v: &Vec3) -> Vec3 {
    pose.rotation.inverse_transform_vector(&(v - pose.translation))
}
