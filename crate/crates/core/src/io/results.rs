use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sequence::{read_json, write_json};
use crate::error::{Error, Result};
use crate::geometry::{AnisoScale, RigidPose, Vec3};
use crate::init::InitResult;
use crate::metrics::EvalReport;
use crate::tracker::{FrameEstimate, FrameLosses, TrackResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Iterations {
    pub hand: usize,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackFrame {
    pub index: usize,
    #[serde(rename = "hand_T")]
    pub hand_t: [f64; 3],
    pub obj_q_wxyz: [f64; 4],
    #[serde(rename = "obj_T")]
    pub obj_t: [f64; 3],
    pub scale: [f64; 3],
    pub losses: FrameLosses,
    pub converged: bool,
    pub iterations: Iterations,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Failure {
    pub flag: bool,
    pub reason: Option<String>,
}

/// Contents of `track.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackFile {
    pub iof_index: usize,
    pub hand_scale: f64,
    pub frames: Vec<TrackFrame>,
    pub failure: Failure,
}

impl From<&TrackResult> for TrackFile {
    fn from(r: &TrackResult) -> Self {
        Self {
            iof_index: r.iof_index,
            hand_scale: r.hand_scale,
            frames: r
                .frames
                .iter()
                .map(|e| TrackFrame {
                    index: e.index,
                    hand_t: [e.hand_translation.x, e.hand_translation.y, e.hand_translation.z],
                    obj_q_wxyz: e.object_pose.wxyz(),
                    obj_t: e.object_pose.translation_array(),
                    scale: e.object_scale.array(),
                    losses: e.losses,
                    converged: e.converged,
                    iterations: Iterations {
                        hand: e.hand_iterations,
                        object: e.object_iterations,
                    },
                    iou: e.iou,
                })
                .collect(),
            failure: Failure {
                flag: r.failure.is_some(),
                reason: r.failure.clone(),
            },
        }
    }
}

impl TrackFile {
    pub fn to_result(&self) -> Result<TrackResult> {
        let frames = self
            .frames
            .iter()
            .map(|f| {
                Ok(FrameEstimate {
                    index: f.index,
                    hand_translation: Vec3::from(f.hand_t),
                    object_pose: RigidPose::from_wxyz(f.obj_q_wxyz, f.obj_t)?,
                    object_scale: AnisoScale::new(f.scale[0], f.scale[1], f.scale[2])?,
                    losses: f.losses,
                    converged: f.converged,
                    hand_iterations: f.iterations.hand,
                    object_iterations: f.iterations.object,
                    iou: f.iou,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrackResult {
            iof_index: self.iof_index,
            hand_scale: self.hand_scale,
            frames,
            failure: if self.failure.flag {
                Some(self.failure.reason.clone().unwrap_or_default())
            } else {
                None
            },
        })
    }

    fn check_finite(&self) -> Result<()> {
        let bad = |what: String| Err(Error::NonFiniteValue(what));
        if !self.hand_scale.is_finite() {
            return bad("hand_scale".into());
        }
        for f in &self.frames {
            let l = &f.losses;
            let fields: [(&str, &[f64]); 5] = [
                ("hand_T", &f.hand_t),
                ("obj_q_wxyz", &f.obj_q_wxyz),
                ("obj_T", &f.obj_t),
                ("scale", &f.scale),
                ("losses", &[l.joint, l.mask, l.dino, l.interact, l.contact, f.iou]),
            ];
            for (name, vals) in fields {
                if vals.iter().any(|v| !v.is_finite()) {
                    return bad(format!("frames[{}].{name}", f.index));
                }
            }
        }
        Ok(())
    }
}

pub fn write_track_result(result: &TrackResult, path: &Path) -> Result<()> {
    let file = TrackFile::from(result);
    file.check_finite()?;
    write_json(path, &file)
}

pub fn read_track_result(path: &Path) -> Result<TrackResult> {
    let file: TrackFile = read_json(path)?;
    file.to_result().map_err(|e| Error::schema(path, e.to_string()))
}

pub fn write_init_result(init: &InitResult, path: &Path) -> Result<()> {
    let finite = init.hand_scale.is_finite()
        && init.object_scale.is_finite()
        && init.per_frame_hand_translation.iter().flatten().all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFiniteValue("init result".into()));
    }
    write_json(path, init)
}

pub fn write_eval_report(report: &EvalReport, path: &Path) -> Result<()> {
    report.check_finite()?;
    write_json(path, report)
}
