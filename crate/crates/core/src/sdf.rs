//! Discretized signed distance function of a watertight mesh and the tanh contact gating.
//!
//! Construction follows the usual two-phase scheme: exact point-triangle distances in a
//! narrow band around every face, closest-triangle propagation by fast sweeping for the
//! rest of the grid, and an inside/outside sign from crossing parity along +x grid lines.

use crate::error::{Error, Result};
use crate::geometry::{TriMesh, Vec3};

pub const DEFAULT_RESOLUTION: usize = 96;
const MARGIN_CELLS: usize = 3;
const EXACT_BAND: i64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    origin: Vec3,
    cell_size: f64,
    dims: [usize; 3],
    values: Vec<f64>,
}

impl SdfGrid {
    pub fn from_parts(origin: Vec3, cell_size: f64, dims: [usize; 3], values: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) || !(cell_size > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sdf grid needs dims >= 2 and positive cell size, got {dims:?} / {cell_size}"
            )));
        }
        if values.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::DimensionMismatch(format!(
                "sdf grid {dims:?} with {} values",
                values.len()
            )));
        }
        Ok(Self {
            origin,
            cell_size,
            dims,
            values,
        })
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn node_value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.idx(i, j, k)]
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.cell_size
    }

    pub fn upper_corner(&self) -> Vec3 {
        self.node_position(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1)
    }

    /// Trilinear interpolation; outside the grid the boundary value plus the Euclidean
    /// distance to the box is returned.
    pub fn query(&self, p: &Vec3) -> f64 {
        let lo = self.origin;
        let hi = self.upper_corner();
        let clamped = p.sup(&lo).inf(&hi);
        let outside = (p - clamped).norm();
        self.interpolate(&clamped) + outside
    }

    fn interpolate(&self, p: &Vec3) -> f64 {
        let g = (p - self.origin) / self.cell_size;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let max_base = self.dims[a] - 2;
            let f = g[a].max(0.0);
            let b = (f.floor() as usize).min(max_base);
            base[a] = b;
            frac[a] = (f - b as f64).clamp(0.0, 1.0);
        }
        let [i, j, k] = base;
        let [fx, fy, fz] = frac;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(self.node_value(i, j, k), self.node_value(i + 1, j, k), fx);
        let c10 = lerp(self.node_value(i, j + 1, k), self.node_value(i + 1, j + 1, k), fx);
        let c01 = lerp(self.node_value(i, j, k + 1), self.node_value(i + 1, j, k + 1), fx);
        let c11 = lerp(
            self.node_value(i, j + 1, k + 1),
            self.node_value(i + 1, j + 1, k + 1),
            fx,
        );
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    }
}

/// Builds the signed distance grid with `resolution` cells along the longest box axis.
pub fn build_sdf(mesh: &TriMesh, resolution: usize) -> Result<SdfGrid> {
    if resolution < 16 {
        return Err(Error::InvalidConfig(format!(
            "sdf resolution must be >= 16, got {resolution}"
        )));
    }
    if mesh.faces().is_empty() {
        return Err(Error::DegenerateMesh("mesh has no faces".into()));
    }
    if !mesh.is_watertight() {
        return Err(Error::NotWatertight {
            open_edges: mesh.open_edge_count(),
        });
    }
    let (lo, hi) = mesh.aabb().expect("mesh with faces has vertices");
    let extent = hi - lo;
    let longest = extent.max();
    if !(longest > 0.0) {
        return Err(Error::DegenerateMesh("zero extent".into()));
    }
    let cell = longest / resolution as f64;
    let margin = MARGIN_CELLS as f64 * cell;
    let origin = lo - Vec3::repeat(margin);
    let dims = [0, 1, 2].map(|a| (extent[a] / cell).ceil() as usize + 1 + 2 * MARGIN_CELLS);
    let n = dims[0] * dims[1] * dims[2];
    let tris: Vec<[Vec3; 3]> = (0..mesh.faces().len()).map(|f| mesh.triangle(f)).collect();

    let mut dist = vec![f64::INFINITY; n];
    let mut closest = vec![usize::MAX; n];
    let idx = |i: usize, j: usize, k: usize| i + dims[0] * (j + dims[1] * k);
    let node = |i: usize, j: usize, k: usize| origin + Vec3::new(i as f64, j as f64, k as f64) * cell;

    // exact distances near each triangle
    for (t, tri) in tris.iter().enumerate() {
        let tlo = tri[0].inf(&tri[1]).inf(&tri[2]);
        let thi = tri[0].sup(&tri[1]).sup(&tri[2]);
        let range = |a: usize| {
            let l = ((tlo[a] - origin[a]) / cell).floor() as i64 - EXACT_BAND;
            let h = ((thi[a] - origin[a]) / cell).ceil() as i64 + EXACT_BAND;
            (l.max(0) as usize, (h.max(0) as usize).min(dims[a] - 1))
        };
        let (i0, i1) = range(0);
        let (j0, j1) = range(1);
        let (k0, k1) = range(2);
        for k in k0..=k1 {
            for j in j0..=j1 {
                for i in i0..=i1 {
                    let d = point_triangle_distance(&node(i, j, k), tri);
                    let id = idx(i, j, k);
                    if d < dist[id] {
                        dist[id] = d;
                        closest[id] = t;
                    }
                }
            }
        }
    }

    // propagate closest triangles
    for _ in 0..2 {
        for dir in 0..8 {
            let di: i64 = if dir & 1 == 0 { 1 } else { -1 };
            let dj: i64 = if dir & 2 == 0 { 1 } else { -1 };
            let dk: i64 = if dir & 4 == 0 { 1 } else { -1 };
            let order = |d: i64, len: usize| -> Vec<usize> {
                if d > 0 {
                    (1..len).collect()
                } else {
                    (0..len - 1).rev().collect()
                }
            };
            let (ois, ojs, oks) = (order(di, dims[0]), order(dj, dims[1]), order(dk, dims[2]));
            for &k in &oks {
                for &j in &ojs {
                    for &i in &ois {
                        let p = node(i, j, k);
                        let here = idx(i, j, k);
                        let ni = (i as i64 - di) as usize;
                        let nj = (j as i64 - dj) as usize;
                        let nk = (k as i64 - dk) as usize;
                        for nb in [
                            idx(ni, j, k),
                            idx(i, nj, k),
                            idx(i, j, nk),
                            idx(ni, nj, k),
                            idx(ni, j, nk),
                            idx(i, nj, nk),
                            idx(ni, nj, nk),
                        ] {
                            let t = closest[nb];
                            if t != usize::MAX && t != closest[here] {
                                let d = point_triangle_distance(&p, &tris[t]);
                                if d < dist[here] {
                                    dist[here] = d;
                                    closest[here] = t;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    // crossing parity along +x; lines are nudged off the lattice so that rays never
    // pass exactly through mesh edges or vertices of axis-aligned geometry
    let nudge_y = cell * 1.234_567e-6;
    let nudge_z = cell * 2.718_281e-6;
    let mut crossings = vec![0u32; n];
    for tri in &tris {
        let ylo = tri.iter().map(|v| v.y).fold(f64::INFINITY, f64::min);
        let yhi = tri.iter().map(|v| v.y).fold(f64::NEG_INFINITY, f64::max);
        let zlo = tri.iter().map(|v| v.z).fold(f64::INFINITY, f64::min);
        let zhi = tri.iter().map(|v| v.z).fold(f64::NEG_INFINITY, f64::max);
        let j0 = (((ylo - nudge_y - origin.y) / cell).ceil().max(0.0)) as usize;
        let j1 = (((yhi - nudge_y - origin.y) / cell).floor() as i64).min(dims[1] as i64 - 1);
        let k0 = (((zlo - nudge_z - origin.z) / cell).ceil().max(0.0)) as usize;
        let k1 = (((zhi - nudge_z - origin.z) / cell).floor() as i64).min(dims[2] as i64 - 1);
        if j1 < 0 || k1 < 0 {
            continue;
        }
        for k in k0..=k1 as usize {
            for j in j0..=j1 as usize {
                let y = origin.y + j as f64 * cell + nudge_y;
                let z = origin.z + k as f64 * cell + nudge_z;
                if let Some(x) = line_x_crossing(y, z, tri) {
                    let fi = ((x - origin.x) / cell).ceil();
                    if fi < 0.0 {
                        crossings[idx(0, j, k)] += 1;
                    } else if (fi as usize) < dims[0] {
                        crossings[idx(fi as usize, j, k)] += 1;
                    }
                }
            }
        }
    }
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            let mut total = 0u32;
            for i in 0..dims[0] {
                total += crossings[idx(i, j, k)];
                if total % 2 == 1 {
                    let id = idx(i, j, k);
                    dist[id] = -dist[id];
                }
            }
        }
    }

    SdfGrid::from_parts(origin, cell, dims, dist)
}

/// x coordinate where the line `{(x, y, z)}` pierces the triangle, if it does.
fn line_x_crossing(y: f64, z: f64, tri: &[Vec3; 3]) -> Option<f64> {
    let (a, b, c) = (tri[0], tri[1], tri[2]);
    let e = |p: &Vec3, q: &Vec3| (q.y - p.y) * (z - p.z) - (q.z - p.z) * (y - p.y);
    let w0 = e(&b, &c);
    let w1 = e(&c, &a);
    let w2 = e(&a, &b);
    let inside = (w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0) || (w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0);
    let sum = w0 + w1 + w2;
    if !inside || sum.abs() < 1e-300 {
        return None;
    }
    Some((w0 * a.x + w1 * b.x + w2 * c.x) / sum)
}

/// Closest point on a triangle (Ericson's region test).
pub(crate) fn closest_point_on_triangle(p: &Vec3, tri: &[Vec3; 3]) -> Vec3 {
    let (a, b, c) = (tri[0], tri[1], tri[2]);
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

pub(crate) fn point_triangle_distance(p: &Vec3, tri: &[Vec3; 3]) -> f64 {
    (p - closest_point_on_triangle(p, tri)).norm()
}

/// Contact gating `w = 1 − tanh(σ · max(0, Φ(v)))` for points given in the object frame.
pub fn gating_weights(grid: &SdfGrid, local_points: &[Vec3], sigma: f64) -> Vec<f64> {
    local_points
        .iter()
        .map(|v| gate(grid.query(v), sigma))
        .collect()
}

#[inline]
pub fn gate(phi: f64, sigma: f64) -> f64 {
    1.0 - (sigma * phi.max(0.0)).tanh()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::primitives;

    fn unit_cube() -> TriMesh {
        primitives::subdivided_box(Vec3::repeat(0.5), 1)
    }

    #[test]
    fn cube_center_and_outside() {
        let g = build_sdf(&unit_cube(), 32).unwrap();
        assert!((g.query(&Vec3::zeros()) + 0.5).abs() < 1e-9);
        assert!((g.query(&Vec3::new(1.0, 0.0, 0.0)) - 0.5).abs() < 1e-9);
        assert!(g.query(&Vec3::new(0.5, 0.1, -0.2)).abs() < g.cell_size());
    }

    #[test]
    fn grid_encloses_mesh_with_margin() {
        let g = build_sdf(&unit_cube(), 16).unwrap();
        let lo = g.origin();
        let hi = g.upper_corner();
        assert!(lo.max() <= -0.5 - 2.0 * g.cell_size() + 1e-12);
        assert!(hi.min() >= 0.5 + 2.0 * g.cell_size() - 1e-12);
    }

    #[test]
    fn rejects_open_and_empty_meshes() {
        assert!(matches!(
            build_sdf(&primitives::quad(1.0, 0.0), 32),
            Err(Error::NotWatertight { .. })
        ));
        let empty = TriMesh::new(vec![Vec3::zeros()], vec![]).unwrap();
        assert!(matches!(build_sdf(&empty, 32), Err(Error::DegenerateMesh(_))));
        assert!(build_sdf(&unit_cube(), 8).is_err());
    }

    #[test]
    fn query_interpolates_nodes_exactly_and_linearly() {
        let mut values = vec![0.0; 8];
        values[0] = 0.1; // (0,0,0)
        values[1] = 0.3; // (1,0,0)
        values[2] = 0.1;
        values[3] = 0.3;
        values[4] = 0.1;
        values[5] = 0.3;
        values[6] = 0.1;
        values[7] = 0.3;
        let g = SdfGrid::from_parts(Vec3::zeros(), 1.0, [2, 2, 2], values).unwrap();
        assert_eq!(g.query(&Vec3::zeros()), 0.1);
        assert_eq!(g.query(&Vec3::new(1.0, 1.0, 1.0)), 0.3);
        assert!((g.query(&Vec3::new(0.5, 0.3, 0.9)) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn far_field_is_positive_and_growing() {
        let small = primitives::subdivided_box(Vec3::repeat(0.03), 1);
        let g = build_sdf(&small, 32).unwrap();
        let far = g.query(&(g.upper_corner() + Vec3::new(1.0, 0.0, 0.0)));
        assert!(far > 0.5);
        let farther = g.query(&(g.upper_corner() + Vec3::new(2.0, 0.0, 0.0)));
        assert!(farther > far);
    }

    #[test]
    fn nodes_match_exact_unsigned_distance() {
        let mesh = primitives::uv_sphere(Vec3::zeros(), 0.05, Vec3::z(), 10, 16);
        let g = build_sdf(&mesh, 24).unwrap();
        let tris: Vec<[Vec3; 3]> = (0..mesh.faces().len()).map(|f| mesh.triangle(f)).collect();
        let [nx, ny, nz] = g.dims();
        for k in (0..nz).step_by(3) {
            for j in (0..ny).step_by(2) {
                for i in 0..nx {
                    let p = g.node_position(i, j, k);
                    let exact = tris
                        .iter()
                        .map(|t| point_triangle_distance(&p, t))
                        .fold(f64::INFINITY, f64::min);
                    assert!((g.node_value(i, j, k).abs() - exact).abs() <= 1.5 * g.cell_size());
                }
            }
        }
    }

    #[test]
    fn gating_examples() {
        assert_eq!(gate(0.0, 40.0), 1.0);
        assert_eq!(gate(-0.01, 40.0), 1.0);
        assert!((gate(0.05, 40.0) - 0.035_972_419_924_183).abs() < 1e-12);
        assert!((gate(0.0125, 40.0) - 0.537_882_842_739_990).abs() < 1e-12);
    }

    #[test]
    fn closest_point_regions() {
        let tri = [Vec3::zeros(), Vec3::x(), Vec3::y()];
        assert_eq!(closest_point_on_triangle(&Vec3::new(-1.0, -1.0, 0.0), &tri), Vec3::zeros());
        let c = closest_point_on_triangle(&Vec3::new(0.2, 0.2, 3.0), &tri);
        assert!((c - Vec3::new(0.2, 0.2, 0.0)).norm() < 1e-15);
        let e = closest_point_on_triangle(&Vec3::new(1.0, 1.0, 0.0), &tri);
        assert!((e - Vec3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn gate_is_a_non_increasing_weight(a in -0.1f64..0.2, b in -0.1f64..0.2, sigma in 1.0f64..100.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (wl, wh) = (gate(lo, sigma), gate(hi, sigma));
            proptest::prop_assert!(wh >= 0.0 && wh <= wl && wl <= 1.0);
            proptest::prop_assert!(lo > 0.0 || wl == 1.0);
        }
    }
}
