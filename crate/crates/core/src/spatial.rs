//! Spatial acceleration structures: a 3D kd-tree for k-nearest-neighbor
//! queries and a uniform hash grid for fixed-radius queries.
//!
//! Both return deterministic, input-order-independent results. KNN candidates
//! are ranked by `(squared distance, x, y, z)` so that permuting the input
//! point set permutes the answers identically; radius queries return indices
//! sorted ascending.

use std::collections::HashMap;

/// kd-tree over 3D points, built once and queried read-only.
pub struct KdTree3 {
    // Node layout: median split, axis = depth % 3.
    nodes: Vec<Node>,
    points: Vec<[f64; 3]>,
    root: Option<usize>,
}

struct Node {
    point_index: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

/// Candidate key: squared distance first, then coordinates so ties do not
/// depend on input order.
#[derive(Clone, Copy, PartialEq)]
struct Key {
    d2: f64,
    coords: [f64; 3],
    index: usize,
}

impl Key {
    fn rank(&self) -> ([u64; 4], usize) {
        // Total order on f64 via the order-preserving bit trick; inputs are
        // finite by construction.
        fn bits(v: f64) -> u64 {
            let b = v.to_bits() as i64;
            (if b < 0 { !b } else { b | i64::MIN }) as u64
        }
        (
            [
                bits(self.d2),
                bits(self.coords[0]),
                bits(self.coords[1]),
                bits(self.coords[2]),
            ],
            self.index,
        )
    }
}

impl KdTree3 {
    pub fn build(points: &[[f64; 3]]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = Self::build_rec(points, &mut order[..], 0, &mut nodes);
        KdTree3 {
            nodes,
            points: points.to_vec(),
            root,
        }
    }

    fn build_rec(
        points: &[[f64; 3]],
        order: &mut [usize],
        depth: usize,
        nodes: &mut Vec<Node>,
    ) -> Option<usize> {
        if order.is_empty() {
            return None;
        }
        let axis = depth % 3;
        // Sort by (axis coordinate, other coordinates, index) for a
        // deterministic tree regardless of input order of equal values.
        order.sort_by(|&a, &b| {
            let ka = (points[a][axis], points[a], a);
            let kb = (points[b][axis], points[b], b);
            ka.partial_cmp(&kb).unwrap()
        });
        let mid = order.len() / 2;
        let point_index = order[mid];
        let id = nodes.len();
        nodes.push(Node {
            point_index,
            axis,
            left: None,
            right: None,
        });
        let (lo, rest) = order.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = Self::build_rec(points, lo, depth + 1, nodes);
        let right = Self::build_rec(points, hi, depth + 1, nodes);
        nodes[id].left = left;
        nodes[id].right = right;
        Some(id)
    }

    /// Indices of the `k` nearest neighbors of `query` (self included when
    /// the query is a stored point), nearest first.
    pub fn knn(&self, query: [f64; 3], k: usize) -> Vec<usize> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let k = k.min(self.points.len());
        // Small bounded worst-list kept sorted; k is small in practice.
        let mut best: Vec<Key> = Vec::with_capacity(k + 1);
        self.search(self.root, query, k, &mut best);
        best.iter().map(|c| c.index).collect()
    }

    fn search(&self, node: Option<usize>, query: [f64; 3], k: usize, best: &mut Vec<Key>) {
        let Some(id) = node else { return };
        let n = &self.nodes[id];
        let p = self.points[n.point_index];
        let d2 = dist2(p, query);
        let key = Key {
            d2,
            coords: p,
            index: n.point_index,
        };
        let pos = best.partition_point(|c| c.rank() <= key.rank());
        best.insert(pos, key);
        if best.len() > k {
            best.pop();
        }
        let diff = query[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, query, k, best);
        if best.len() < k || diff * diff <= best.last().unwrap().d2 {
            self.search(far, query, k, best);
        }
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Uniform hash grid with cubic cells for exact fixed-radius queries.
pub struct HashGrid3 {
    cell: f64,
    buckets: HashMap<(i64, i64, i64), Vec<usize>>,
    points: Vec<[f64; 3]>,
}

impl HashGrid3 {
    pub fn build(points: &[[f64; 3]], cell: f64) -> Self {
        assert!(cell > 0.0, "grid cell must be positive");
        let mut buckets: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(*p, cell)).or_default().push(i);
        }
        HashGrid3 {
            cell,
            buckets,
            points: points.to_vec(),
        }
    }

    fn key(p: [f64; 3], cell: f64) -> (i64, i64, i64) {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    }

    /// All indices within `radius` (inclusive) of `query`, ascending.
    /// Exact as long as `radius <= cell`.
    pub fn within(&self, query: [f64; 3], radius: f64) -> Vec<usize> {
        debug_assert!(radius <= self.cell + 1e-12);
        let r2 = radius * radius;
        let (cx, cy, cz) = Self::key(query, self.cell);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.buckets.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &i in bucket {
                            if dist2(self.points[i], query) <= r2 {
                                out.push(i);
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-2.0..2.0),
                ]
            })
            .collect()
    }

    fn brute_knn(points: &[[f64; 3]], q: [f64; 3], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        idx.sort_by(|&a, &b| {
            let ka = (dist2(points[a], q), points[a]);
            let kb = (dist2(points[b], q), points[b]);
            ka.partial_cmp(&kb).unwrap()
        });
        idx.truncate(k);
        idx
    }

    #[test]
    fn knn_matches_exhaustive_search() {
        let points = random_points(500, 11);
        let tree = KdTree3::build(&points);
        for (qi, q) in points.iter().enumerate().step_by(17) {
            let got = tree.knn(*q, 8);
            let want = brute_knn(&points, *q, 8);
            assert_eq!(got, want, "query {qi}");
            assert_eq!(got[0], qi, "self is the nearest neighbor");
        }
    }

    #[test]
    fn knn_k_larger_than_n_clamps() {
        let points = random_points(5, 3);
        let tree = KdTree3::build(&points);
        assert_eq!(tree.knn(points[0], 50).len(), 5);
    }

    #[test]
    fn knn_is_input_order_independent() {
        let points = random_points(200, 5);
        let mut reversed = points.clone();
        reversed.reverse();
        let t1 = KdTree3::build(&points);
        let t2 = KdTree3::build(&reversed);
        let n = points.len();
        for q in points.iter().step_by(13) {
            let a = t1.knn(*q, 6);
            let b = t2.knn(*q, 6);
            let b_mapped: Vec<usize> = b.iter().map(|&i| n - 1 - i).collect();
            assert_eq!(a, b_mapped);
        }
    }

    #[test]
    fn grid_within_matches_brute_force() {
        let points = random_points(400, 21);
        let radius = 0.9;
        let grid = HashGrid3::build(&points, radius);
        for q in points.iter().step_by(29) {
            let got = grid.within(*q, radius);
            let mut want: Vec<usize> = (0..points.len())
                .filter(|&i| dist2(points[i], *q) <= radius * radius)
                .collect();
            want.sort_unstable();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn grid_radius_is_inclusive() {
        let points = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let grid = HashGrid3::build(&points, 1.0);
        assert_eq!(grid.within([0.0, 0.0, 0.0], 1.0), vec![0, 1]);
    }
}
