//! On-disk sequence layout.
//!
//! ```text
//! meta.json
//! object/canonical.obj
//! object/vertex_desc.tf        optional (V, C) f32
//! frames/000000/depth.tf       (H, W) f32 meters, 0 = invalid
//! frames/000000/mask_obj.tf    (H, W) u8
//! frames/000000/mask_hand.tf   (H, W) u8
//! frames/000000/feat.tf        optional (hf, wf, C) f32
//! frames/000000/hand.json
//! frames/000000/hand_verts.tf  (N, 3) f32
//! gt.json                      optional
//! onset_pose.json              optional
//! ```

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::tensor::Tensor;
use crate::data::{FrameObservation, FrameSource, GroundTruth, MemorySequence, OnsetPose, SequenceMeta};
use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, DepthMap, HandFrameObservation, TriMesh, Vec2, Vec3, NUM_JOINTS};
use crate::losses::FeatureGrid;

pub fn frame_dir(root: &Path, index: usize) -> PathBuf {
    root.join("frames").join(format!("{index:06}"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::schema(path, e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_optional_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if path.exists() {
        read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Serialized form of the hand estimator output. Missing 2D keypoints are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandJson {
    pub joints3d: Vec<[f64; 3]>,
    pub joints2d: Vec<Option<[f64; 2]>>,
    pub rotation_wxyz: [f64; 4],
}

impl HandJson {
    pub fn from_observation(h: &HandFrameObservation) -> Self {
        let q = h.rotation.quaternion();
        Self {
            joints3d: h.joints3d.iter().map(|j| [j.x, j.y, j.z]).collect(),
            joints2d: h
                .joints2d
                .iter()
                .map(|x| (x.x.is_finite() && x.y.is_finite()).then_some([x.x, x.y]))
                .collect(),
            rotation_wxyz: [q.w, q.i, q.j, q.k],
        }
    }
}

/// Lazily loaded sequence directory.
#[derive(Debug)]
pub struct DiskSequence {
    root: PathBuf,
    meta: SequenceMeta,
    mesh: TriMesh,
    vertex_desc: Option<Vec<Vec<f64>>>,
    pub gt: Option<GroundTruth>,
    pub onset_pose: Option<OnsetPose>,
}

/// Opens and validates a sequence directory; frame payloads are read on demand, but
/// every referenced file must exist.
pub fn read_sequence(root: &Path) -> Result<DiskSequence> {
    let meta_path = root.join("meta.json");
    let meta: SequenceMeta = read_json(&meta_path)?;
    meta.validate().map_err(|e| Error::schema(&meta_path, e.to_string()))?;
    let mesh = TriMesh::read_obj(&root.join("object").join("canonical.obj"))?;
    let desc_path = root.join("object").join("vertex_desc.tf");
    let vertex_desc = if desc_path.exists() {
        let t = Tensor::read(&desc_path)?;
        let v = t.expect_f32(2, &desc_path)?;
        let (n, c) = (t.shape()[0], t.shape()[1]);
        if n != mesh.vertices().len() {
            return Err(Error::schema(&desc_path, format!("{n} descriptors for {} vertices", mesh.vertices().len())));
        }
        Some(v.chunks(c.max(1)).take(n).map(|d| d.iter().map(|&x| f64::from(x)).collect()).collect())
    } else {
        None
    };
    for i in 0..meta.frame_count {
        let dir = frame_dir(root, i);
        for name in ["depth.tf", "mask_obj.tf", "mask_hand.tf", "hand.json", "hand_verts.tf"] {
            let p = dir.join(name);
            if !p.is_file() {
                return Err(Error::MissingFile(p));
            }
        }
    }
    if frame_dir(root, meta.frame_count).exists() {
        return Err(Error::schema(
            &meta_path,
            format!("frame directory {} exists beyond frame_count", meta.frame_count),
        ));
    }
    let gt = read_optional_json(&root.join("gt.json"))?;
    let onset_pose = read_optional_json(&root.join("onset_pose.json"))?;
    Ok(DiskSequence {
        root: root.to_path_buf(),
        meta,
        mesh,
        vertex_desc,
        gt,
        onset_pose,
    })
}

impl DiskSequence {
    pub fn root(&self) -> &Path {
        &self.root
    }

    fn read_mask(&self, path: &Path) -> Result<BinaryMask> {
        let t = Tensor::read(path)?;
        let bits = t.expect_u8(2, path)?;
        self.check_image_shape(t.shape(), path)?;
        BinaryMask::new(t.shape()[1], t.shape()[0], bits.to_vec()).map_err(|e| Error::schema(path, e.to_string()))
    }

    fn check_image_shape(&self, shape: &[usize], path: &Path) -> Result<()> {
        let k = &self.meta.intrinsics;
        if shape != [k.height, k.width] {
            return Err(Error::schema(
                path,
                format!("shape {shape:?} does not match image size {}x{} from meta.json", k.width, k.height),
            ));
        }
        Ok(())
    }
}

impl FrameSource for DiskSequence {
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
        if index >= self.meta.frame_count {
            return Err(Error::InvalidConfig(format!(
                "frame {index} out of range (sequence has {})",
                self.meta.frame_count
            )));
        }
        let dir = frame_dir(&self.root, index);
        let depth_path = dir.join("depth.tf");
        let t = Tensor::read(&depth_path)?;
        let values = t.expect_f32(2, &depth_path)?.to_vec();
        self.check_image_shape(t.shape(), &depth_path)?;
        let depth = DepthMap::new(t.shape()[1], t.shape()[0], values).map_err(|e| Error::schema(&depth_path, e.to_string()))?;
        let mask_obj = self.read_mask(&dir.join("mask_obj.tf"))?;
        let mask_hand = self.read_mask(&dir.join("mask_hand.tf"))?;

        let feat_path = dir.join("feat.tf");
        let features = if feat_path.exists() {
            let t = Tensor::read(&feat_path)?;
            let v = t.expect_f32(3, &feat_path)?;
            let s = t.shape();
            Some(
                FeatureGrid::new(s[0], s[1], s[2], v.iter().map(|&x| f64::from(x)).collect())
                    .map_err(|e| Error::schema(&feat_path, e.to_string()))?,
            )
        } else {
            None
        };

        let hand_path = dir.join("hand.json");
        let hj: HandJson = read_json(&hand_path)?;
        if hj.joints3d.len() != NUM_JOINTS || hj.joints2d.len() != NUM_JOINTS {
            return Err(Error::schema(&hand_path, format!("expected {NUM_JOINTS} joints")));
        }
        let rotation = crate::geometry::RigidPose::from_wxyz(hj.rotation_wxyz, [0.0; 3])
            .map_err(|e| Error::schema(&hand_path, e.to_string()))?
            .rotation;
        let verts_path = dir.join("hand_verts.tf");
        let t = Tensor::read(&verts_path)?;
        let v = t.expect_f32(2, &verts_path)?;
        if t.shape()[1] != 3 {
            return Err(Error::schema(&verts_path, format!("expected (N, 3), got {:?}", t.shape())));
        }
        let vertices = v
            .chunks_exact(3)
            .map(|c| Vec3::new(f64::from(c[0]), f64::from(c[1]), f64::from(c[2])))
            .collect();
        let hand = HandFrameObservation::new(
            vertices,
            hj.joints3d.iter().map(|j| Vec3::new(j[0], j[1], j[2])).collect(),
            hj.joints2d
                .iter()
                .map(|x| x.map_or(Vec2::new(f64::NAN, f64::NAN), |x| Vec2::new(x[0], x[1])))
                .collect(),
            rotation,
        )?;
        Ok(FrameObservation {
            index,
            depth,
            mask_obj,
            mask_hand,
            features,
            hand,
        })
    }
}

fn mask_tensor(m: &BinaryMask) -> Tensor {
    Tensor::u8(vec![m.height(), m.width()], m.bits().to_vec()).expect("mask dims are consistent")
}

/// Writes a complete sequence directory (creating it if needed).
pub fn write_sequence(seq: &MemorySequence, root: &Path) -> Result<()> {
    create_dir(&root.join("object"))?;
    write_json(&root.join("meta.json"), &seq.meta)?;
    seq.mesh.write_obj(&root.join("object").join("canonical.obj"))?;
    if let Some(desc) = &seq.vertex_desc {
        let c = desc.first().map_or(0, Vec::len);
        let flat: Vec<f32> = desc.iter().flatten().map(|&x| x as f32).collect();
        Tensor::f32(vec![desc.len(), c], flat)?.write(&root.join("object").join("vertex_desc.tf"))?;
    }
    for f in &seq.frames {
        let dir = frame_dir(root, f.index);
        create_dir(&dir)?;
        Tensor::f32(vec![f.depth.height(), f.depth.width()], f.depth.values().to_vec())?.write(&dir.join("depth.tf"))?;
        mask_tensor(&f.mask_obj).write(&dir.join("mask_obj.tf"))?;
        mask_tensor(&f.mask_hand).write(&dir.join("mask_hand.tf"))?;
        if let Some(g) = &f.features {
            let (hf, wf) = g.dims();
            let flat: Vec<f32> = g.values().iter().map(|&x| x as f32).collect();
            Tensor::f32(vec![hf, wf, g.channels()], flat)?.write(&dir.join("feat.tf"))?;
        }
        write_json(&dir.join("hand.json"), &HandJson::from_observation(&f.hand))?;
        let flat: Vec<f32> = f.hand.vertices.iter().flat_map(|v| [v.x as f32, v.y as f32, v.z as f32]).collect();
        Tensor::f32(vec![f.hand.vertices.len(), 3], flat)?.write(&dir.join("hand_verts.tf"))?;
    }
    if let Some(gt) = &seq.gt {
        write_json(&root.join("gt.json"), gt)?;
    }
    if let Some(p) = &seq.onset_pose {
        write_json(&root.join("onset_pose.json"), p)?;
    }
    Ok(())
}
