//! In-memory sequence model shared by the synthesizer, the file layer and the tracker.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, CameraIntrinsics, DepthMap, HandFrameObservation, RigidPose, TriMesh};
use crate::losses::FeatureGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceMeta {
    pub intrinsics: CameraIntrinsics,
    pub frame_count: usize,
    pub stride: usize,
    #[serde(default)]
    pub source: String,
}

impl SequenceMeta {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.frame_count == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig(format!(
                "frame_count and stride must be ≥ 1 (got {}, {})",
                self.frame_count, self.stride
            )));
        }
        Ok(())
    }
}

/// Everything observed in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub index: usize,
    pub depth: DepthMap,
    pub mask_obj: BinaryMask,
    pub mask_hand: BinaryMask,
    pub features: Option<FeatureGrid>,
    pub hand: HandFrameObservation,
}

/// Object pose from an external estimator, used to anchor the onset frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnsetPose {
    #[serde(default)]
    pub frame_index: Option<usize>,
    pub obj_q_wxyz: [f64; 4],
    #[serde(rename = "obj_T")]
    pub obj_t: [f64; 3],
}

impl OnsetPose {
    pub fn pose(&self) -> Result<RigidPose> {
        RigidPose::from_wxyz(self.obj_q_wxyz, self.obj_t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtFrame {
    pub index: usize,
    pub obj_q_wxyz: [f64; 4],
    #[serde(rename = "obj_T")]
    pub obj_t: [f64; 3],
    #[serde(rename = "hand_T")]
    pub hand_t: [f64; 3],
}

impl GtFrame {
    pub fn object_pose(&self) -> Result<RigidPose> {
        RigidPose::from_wxyz(self.obj_q_wxyz, self.obj_t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub object_scale: [f64; 3],
    pub hand_scale: f64,
    pub iof_index: usize,
    pub frames: Vec<GtFrame>,
}

impl GroundTruth {
    pub fn frame(&self, index: usize) -> Option<&GtFrame> {
        self.frames.iter().find(|f| f.index == index)
    }
}

/// Random access to a sequence's frames; implemented lazily by the on-disk reader.
pub trait FrameSource {
    fn meta(&self) -> &SequenceMeta;
    fn canonical_mesh(&self) -> &TriMesh;
    /// Optional per-vertex reference descriptors of the canonical mesh.
    fn vertex_descriptors(&self) -> Option<&[Vec<f64>]>;
    fn frame(&self, index: usize) -> Result<FrameObservation>;

    fn frame_count(&self) -> usize {
        self.meta().frame_count
    }
}

/// A fully materialized sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorySequence {
    pub meta: SequenceMeta,
    pub mesh: TriMesh,
    pub vertex_desc: Option<Vec<Vec<f64>>>,
    pub frames: Vec<FrameObservation>,
    pub gt: Option<GroundTruth>,
    pub onset_pose: Option<OnsetPose>,
}

impl FrameSource for MemorySequence {
    fn meta(&self) -> &SequenceMeta {
        &self.meta
    }

    fn canonical_mesh(&self) -> &TriMesh {
        &self.mesh
    }

    fn vertex_descriptors(&self) -> Option<&[Vec<f64>]> {
        self.vertex_desc.as_deref()
    }

    fn frame(&self, index: usize) -> Result<FrameObservation> {
        self.frames
            .get(index)
            .cloned()
            .ok_or_else(|| Error::InvalidConfig(format!("frame {index} out of range")))
    }
}
