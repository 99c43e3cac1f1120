//! Exact nearest-neighbor lookups over static 3D point sets.

use kiddo::{ImmutableKdTree, SquaredEuclidean};

use crate::geometry::Vec3;

pub struct PointIndex {
    tree: ImmutableKdTree<f64, 3>,
    points: Vec<Vec3>,
}

impl PointIndex {
    /// Returns `None` for an empty set.
    pub fn new(points: &[Vec3]) -> Option<Self> {
        if points.is_empty() {
            return None;
        }
        let raw: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        Some(Self {
            tree: ImmutableKdTree::new_from_slice(&raw),
            points: points.to_vec(),
        })
    }

    /// Index and squared distance of the closest stored point.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let nn = self.tree.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]);
        (nn.item as usize, nn.distance)
    }

    pub fn point(&self, i: usize) -> &Vec3 {
        &self.points[i]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rand_pt = |rng: &mut ChaCha8Rng| {
            Vec3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>())
        };
        let pts: Vec<Vec3> = (0..700).map(|_| rand_pt(&mut rng)).collect();
        let index = PointIndex::new(&pts).unwrap();
        for _ in 0..200 {
            let q = rand_pt(&mut rng) * 1.2;
            let (_, d2) = index.nearest(&q);
            let brute = pts.iter().map(|p| (p - q).norm_squared()).fold(f64::INFINITY, f64::min);
            assert!((d2 - brute).abs() < 1e-15);
        }
        assert!(PointIndex::new(&[]).is_none());
    }
}
