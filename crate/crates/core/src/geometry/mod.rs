//! Camera model, rigid transforms, meshes, point clouds and per-frame images.

mod camera;
mod image;
mod mesh;
mod pose;

pub use camera::CameraIntrinsics;
pub use image::{unproject_masked, BinaryMask, DepthMap, HandFrameObservation, NUM_JOINTS};
pub use mesh::{primitives, MeshSample, PointCloud, TriMesh};
pub use pose::{apply_pose, to_object_frame, AnisoScale, RigidPose};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Vec2 = nalgebra::Vector2<f64>;
