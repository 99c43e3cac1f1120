use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Vec3;
use crate::error::{Error, Result};

const MIN_FACE_AREA: f64 = 1e-18;

/// Triangle mesh in meters with outward (counter-clockwise) winding.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    watertight: bool,
}

/// A surface sample with the face it came from and its barycentric weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshSample {
    pub point: Vec3,
    pub face: usize,
    pub bary: [f64; 3],
}

impl TriMesh {
    /// Validates indices and drops zero-area faces.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(bad) = faces.iter().flatten().find(|&&i| i >= vertices.len()) {
            return Err(Error::DegenerateMesh(format!(
                "face index {bad} out of range for {} vertices",
                vertices.len()
            )));
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::DegenerateMesh("non-finite vertex".into()));
        }
        let faces: Vec<[usize; 3]> = faces
            .into_iter()
            .filter(|f| {
                f[0] != f[1] && f[1] != f[2] && f[0] != f[2] && {
                    let [a, b, c] = f.map(|i| vertices[i]);
                    (b - a).cross(&(c - a)).norm() * 0.5 > MIN_FACE_AREA
                }
            })
            .collect();
        let watertight = !faces.is_empty() && count_open_edges(&faces) == 0;
        Ok(Self {
            vertices,
            faces,
            watertight,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn is_watertight(&self) -> bool {
        self.watertight
    }

    pub fn open_edge_count(&self) -> usize {
        count_open_edges(&self.faces)
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        self.faces[f].map(|i| self.vertices[i])
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        (b - a).cross(&(c - a)).norm() * 0.5
    }

    pub fn aabb(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (lo.inf(v), hi.sup(v))
        }))
    }

    /// Largest distance between two vertices.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.vertices.iter().enumerate() {
            for b in &self.vertices[i + 1..] {
                best = best.max((a - b).norm_squared());
            }
        }
        best.sqrt()
    }

    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.vertices[i]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3) -> Self {
        Self {
            vertices: self.vertices.iter().map(f).collect(),
            faces: self.faces.clone(),
            watertight: self.watertight,
        }
    }

    /// Appends another mesh's geometry (indices shifted).
    pub fn merged(&self, other: &TriMesh) -> Self {
        let off = self.vertices.len();
        let mut vertices = self.vertices.clone();
        vertices.extend_from_slice(&other.vertices);
        let mut faces = self.faces.clone();
        faces.extend(other.faces.iter().map(|f| f.map(|i| i + off)));
        let watertight = self.watertight && other.watertight;
        Self {
            vertices,
            faces,
            watertight,
        }
    }

    /// Area-weighted uniform surface samples, deterministic for a given RNG state.
    pub fn sample_surface(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<MeshSample> {
        if self.faces.is_empty() {
            return Vec::new();
        }
        let mut cdf = Vec::with_capacity(self.faces.len());
        let mut acc = 0.0;
        for f in 0..self.faces.len() {
            acc += self.face_area(f);
            cdf.push(acc);
        }
        (0..count)
            .map(|_| {
                let r = rng.random::<f64>() * acc;
                let face = cdf.partition_point(|&c| c < r).min(self.faces.len() - 1);
                let (mut a, mut b) = (rng.random::<f64>(), rng.random::<f64>());
                if a + b > 1.0 {
                    a = 1.0 - a;
                    b = 1.0 - b;
                }
                let bary = [1.0 - a - b, a, b];
                let [p0, p1, p2] = self.triangle(face);
                MeshSample {
                    point: p0 * bary[0] + p1 * bary[1] + p2 * bary[2],
                    face,
                    bary,
                }
            })
            .collect()
    }

    pub fn read_obj(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::parse_obj(&text).map_err(|reason| Error::schema(path, reason))
    }

    pub fn parse_obj(text: &str) -> std::result::Result<Self, String> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|s| s.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| format!("line {}: {e}", lineno + 1))?;
                    if c.len() != 3 {
                        return Err(format!("line {}: vertex needs 3 coordinates", lineno + 1));
                    }
                    vertices.push(Vec3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let idx: Vec<usize> = it
                        .map(|tok| {
                            let head = tok.split('/').next().unwrap_or("");
                            head.parse::<i64>()
                                .map_err(|e| format!("line {}: {e}", lineno + 1))
                                .and_then(|i| {
                                    let n = vertices.len() as i64;
                                    let i = if i < 0 { n + i } else { i - 1 };
                                    if i < 0 {
                                        Err(format!("line {}: bad index", lineno + 1))
                                    } else {
                                        Ok(i as usize)
                                    }
                                })
                        })
                        .collect::<std::result::Result<_, _>>()?;
                    if idx.len() < 3 {
                        return Err(format!("line {}: face needs 3 indices", lineno + 1));
                    }
                    // fan triangulation for polygons
                    for k in 1..idx.len() - 1 {
                        faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Self::new(vertices, faces).map_err(|e| e.to_string())
    }

    pub fn to_obj_string(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj_string()).map_err(|e| Error::io(path, e))
    }
}

fn count_open_edges(faces: &[[usize; 3]]) -> usize {
    let mut uses: HashMap<(usize, usize), usize> = HashMap::new();
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            *uses.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    uses.values().filter(|&&n| n != 2).count()
}

/// Finite point set in meters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFiniteValue("point cloud".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }
}

/// Procedural watertight meshes used by the synthetic generator and tests.
pub mod primitives {
    use super::*;
    use nalgebra::UnitQuaternion;

    /// Axis-aligned box centered at the origin, each face split into `n × n` quads.
    pub fn subdivided_box(half: Vec3, n: usize) -> TriMesh {
        let n = n.max(1);
        let mut index: HashMap<[usize; 3], usize> = HashMap::new();
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        let mut vid = |l: [usize; 3], vertices: &mut Vec<Vec3>| -> usize {
            *index.entry(l).or_insert_with(|| {
                let c = |i: usize, h: f64| (2.0 * i as f64 / n as f64 - 1.0) * h;
                vertices.push(Vec3::new(c(l[0], half.x), c(l[1], half.y), c(l[2], half.z)));
                vertices.len() - 1
            })
        };
        // (normal axis, side, tangent axes ordered so that t1 × t2 = outward normal)
        for axis in 0..3 {
            for side in [0usize, n] {
                let (mut t1, mut t2) = ((axis + 1) % 3, (axis + 2) % 3);
                if side == 0 {
                    std::mem::swap(&mut t1, &mut t2);
                }
                for i in 0..n {
                    for j in 0..n {
                        let lat = |a: usize, b: usize| {
                            let mut l = [0usize; 3];
                            l[axis] = side;
                            l[t1] = a;
                            l[t2] = b;
                            l
                        };
                        let v00 = vid(lat(i, j), &mut vertices);
                        let v10 = vid(lat(i + 1, j), &mut vertices);
                        let v11 = vid(lat(i + 1, j + 1), &mut vertices);
                        let v01 = vid(lat(i, j + 1), &mut vertices);
                        faces.push([v00, v10, v11]);
                        faces.push([v00, v11, v01]);
                    }
                }
            }
        }
        TriMesh::new(vertices, faces).expect("box construction is valid")
    }

    /// Closed cylinder along the z axis, centered at the origin.
    pub fn cylinder(radius: f64, half_height: f64, segments: usize, rings: usize) -> TriMesh {
        let segments = segments.max(3);
        let rings = rings.max(1);
        let mut vertices = Vec::new();
        for r in 0..=rings {
            let z = -half_height + 2.0 * half_height * r as f64 / rings as f64;
            for s in 0..segments {
                let a = std::f64::consts::TAU * s as f64 / segments as f64;
                vertices.push(Vec3::new(radius * a.cos(), radius * a.sin(), z));
            }
        }
        let bottom = vertices.len();
        vertices.push(Vec3::new(0.0, 0.0, -half_height));
        let top = vertices.len();
        vertices.push(Vec3::new(0.0, 0.0, half_height));
        let id = |r: usize, s: usize| r * segments + s % segments;
        let mut faces = Vec::new();
        for r in 0..rings {
            for s in 0..segments {
                faces.push([id(r, s), id(r, s + 1), id(r + 1, s + 1)]);
                faces.push([id(r, s), id(r + 1, s + 1), id(r + 1, s)]);
            }
        }
        for s in 0..segments {
            faces.push([bottom, id(0, s + 1), id(0, s)]);
            faces.push([top, id(rings, s), id(rings, s + 1)]);
        }
        TriMesh::new(vertices, faces).expect("cylinder construction is valid")
    }

    /// Latitude/longitude sphere whose north pole points along `pole`.
    pub fn uv_sphere(center: Vec3, radius: f64, pole: Vec3, rings: usize, segments: usize) -> TriMesh {
        let rings = rings.max(2);
        let segments = segments.max(3);
        let rot = UnitQuaternion::rotation_between(&Vec3::z(), &pole)
            .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI));
        let mut vertices = vec![Vec3::new(0.0, 0.0, radius)];
        for r in 1..rings {
            let theta = std::f64::consts::PI * r as f64 / rings as f64;
            for s in 0..segments {
                let phi = std::f64::consts::TAU * s as f64 / segments as f64;
                vertices.push(Vec3::new(
                    radius * theta.sin() * phi.cos(),
                    radius * theta.sin() * phi.sin(),
                    radius * theta.cos(),
                ));
            }
        }
        vertices.push(Vec3::new(0.0, 0.0, -radius));
        let south = vertices.len() - 1;
        let id = |r: usize, s: usize| 1 + (r - 1) * segments + s % segments;
        let mut faces = Vec::new();
        for s in 0..segments {
            faces.push([0, id(1, s), id(1, s + 1)]);
            faces.push([south, id(rings - 1, s + 1), id(rings - 1, s)]);
        }
        for r in 1..rings - 1 {
            for s in 0..segments {
                faces.push([id(r, s), id(r + 1, s), id(r + 1, s + 1)]);
                faces.push([id(r, s), id(r + 1, s + 1), id(r, s + 1)]);
            }
        }
        let vertices = vertices.into_iter().map(|v| rot * v + center).collect();
        TriMesh::new(vertices, faces).expect("sphere construction is valid")
    }

    /// Single open square in the plane `z = depth`, facing the camera (normal −z).
    pub fn quad(half: f64, depth: f64) -> TriMesh {
        let vertices = vec![
            Vec3::new(-half, -half, depth),
            Vec3::new(half, -half, depth),
            Vec3::new(half, half, depth),
            Vec3::new(-half, half, depth),
        ];
        TriMesh::new(vertices, vec![[0, 2, 1], [0, 3, 2]]).expect("quad construction is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::primitives::*;
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn primitives_are_watertight_and_outward() {
        let b = subdivided_box(Vec3::new(0.5, 0.5, 0.5), 3);
        assert!(b.is_watertight());
        assert!((b.signed_volume() - 1.0).abs() < 1e-12);
        assert_eq!(b.vertices().len(), 6 * 9 + 2);
        let c = cylinder(0.5, 1.0, 32, 2);
        assert!(c.is_watertight());
        assert!(c.signed_volume() > 0.0);
        let s = uv_sphere(Vec3::zeros(), 1.0, Vec3::x(), 8, 12);
        assert!(s.is_watertight());
        assert!(s.signed_volume() > 0.0);
        assert!((s.vertices()[0] - Vec3::x()).norm() < 1e-12);
        assert!(!quad(1.0, 1.0).is_watertight());
    }

    #[test]
    fn degenerate_faces_are_dropped() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::x() * 2.0, Vec3::y()];
        let m = TriMesh::new(v, vec![[0, 1, 2], [0, 1, 3]]).unwrap();
        assert_eq!(m.faces().len(), 1);
        assert!(TriMesh::new(vec![Vec3::zeros()], vec![[0, 0, 1]]).is_err());
    }

    #[test]
    fn obj_round_trip() {
        let b = subdivided_box(Vec3::new(0.04, 0.03, 0.05), 2);
        let back = TriMesh::parse_obj(&b.to_obj_string()).unwrap();
        assert_eq!(back, b);
        let quads = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
        assert_eq!(TriMesh::parse_obj(quads).unwrap().faces().len(), 2);
        assert!(TriMesh::parse_obj("v 0 0\n").is_err());
    }

    #[test]
    fn surface_samples_lie_on_faces() {
        let b = subdivided_box(Vec3::new(0.5, 0.5, 0.5), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in b.sample_surface(500, &mut rng) {
            assert!((s.point.abs().max() - 0.5).abs() < 1e-12);
        }
    }
}
