//! Density-based clustering of stacked foreground/unlabeled points and
//! filtering of the resulting clusters by foreground evidence.
//!
//! Neighborhood queries run on a uniform hash grid with cell size `eps`, so
//! eps-ball results are exact. Cluster expansion is sequential with seeds and
//! neighbor lists visited in ascending index order, which fixes border-point
//! ownership deterministically.

use crate::error::{Error, Result};
use crate::labels::CoarseLabel;
use crate::spatial::HashGrid3;

/// Per-point cluster assignment; `-1` marks noise or unclustered points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSet {
    pub assignment: Vec<i32>,
    pub members: Vec<Vec<usize>>,
}

impl ClusterSet {
    pub fn empty(n: usize) -> Self {
        ClusterSet {
            assignment: vec![-1; n],
            members: Vec::new(),
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.members.len()
    }

    pub fn noise_count(&self) -> usize {
        self.assignment.iter().filter(|&&a| a < 0).count()
    }
}

/// Per-cluster arithmetic means of member coordinates.
#[derive(Debug, Clone)]
pub struct ClusterCenters {
    pub centers: Vec<[f64; 3]>,
}

/// Standard DBSCAN: a point is core iff it has at least `min_pts` neighbors
/// within `eps` inclusive, itself counted. Clusters are connected components
/// of core points plus border points reachable from them.
pub fn dbscan(coords: &[[f64; 3]], eps: f64, min_pts: usize) -> Result<ClusterSet> {
    if eps <= 0.0 {
        return Err(Error::config(format!(
            "dbscan eps must be positive, got {eps}"
        )));
    }
    if min_pts < 1 {
        return Err(Error::config(
            "dbscan min_pts must be at least 1".to_string(),
        ));
    }
    let n = coords.len();
    if n == 0 {
        return Ok(ClusterSet::empty(0));
    }
    let grid = HashGrid3::build(coords, eps);
    let mut assignment = vec![-1i32; n];
    let mut visited = vec![false; n];
    let mut members: Vec<Vec<usize>> = Vec::new();

    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        visited[seed] = true;
        let neighbors = grid.within(coords[seed], eps);
        if neighbors.len() < min_pts {
            continue; // noise unless later claimed as a border point
        }
        let cluster = members.len() as i32;
        let mut cluster_members = vec![seed];
        assignment[seed] = cluster;
        let mut queue: std::collections::VecDeque<usize> = neighbors.into();
        while let Some(q) = queue.pop_front() {
            if assignment[q] < 0 {
                assignment[q] = cluster;
                cluster_members.push(q);
            }
            if visited[q] {
                continue;
            }
            visited[q] = true;
            let qn = grid.within(coords[q], eps);
            if qn.len() >= min_pts {
                queue.extend(qn);
            }
        }
        cluster_members.sort_unstable();
        members.push(cluster_members);
    }
    Ok(ClusterSet {
        assignment,
        members,
    })
}

/// Keep exactly the clusters containing at least one foreground point, with
/// ids recompacted densely in their original relative order.
pub fn filter_foreground(clusters: &ClusterSet, labels: &[CoarseLabel]) -> Result<ClusterSet> {
    if clusters.assignment.len() != labels.len() {
        return Err(Error::data(format!(
            "filter_foreground: {} assignments but {} labels",
            clusters.assignment.len(),
            labels.len()
        )));
    }
    let mut assignment = vec![-1i32; clusters.assignment.len()];
    let mut members = Vec::new();
    for cluster in &clusters.members {
        if cluster
            .iter()
            .any(|&i| labels[i] == CoarseLabel::Foreground)
        {
            let id = members.len() as i32;
            for &i in cluster {
                assignment[i] = id;
            }
            members.push(cluster.clone());
        }
    }
    Ok(ClusterSet {
        assignment,
        members,
    })
}

/// Arithmetic mean of each cluster's member coordinates.
pub fn cluster_centers(clusters: &ClusterSet, coords: &[[f64; 3]]) -> ClusterCenters {
    let centers = clusters
        .members
        .iter()
        .map(|m| {
            let mut c = [0.0; 3];
            for &i in m {
                for (axis, v) in c.iter_mut().enumerate() {
                    *v += coords[i][axis];
                }
            }
            let inv = 1.0 / m.len() as f64;
            [c[0] * inv, c[1] * inv, c[2] * inv]
        })
        .collect();
    ClusterCenters { centers }
}

#[cfg(test)]
pub mod reference {
    //! Brute-force O(n^2) DBSCAN used as the oracle in tests. Kept separate
    //! from the grid implementation so the two share no query code.

    use super::ClusterSet;

    pub fn dbscan_reference(coords: &[[f64; 3]], eps: f64, min_pts: usize) -> ClusterSet {
        let n = coords.len();
        let eps2 = eps * eps;
        let dist2 = |a: usize, b: usize| -> f64 {
            let dx = coords[a][0] - coords[b][0];
            let dy = coords[a][1] - coords[b][1];
            let dz = coords[a][2] - coords[b][2];
            dx * dx + dy * dy + dz * dz
        };
        let region = |i: usize| -> Vec<usize> { (0..n).filter(|&j| dist2(i, j) <= eps2).collect() };
        let mut assignment = vec![-1i32; n];
        let mut visited = vec![false; n];
        let mut members: Vec<Vec<usize>> = Vec::new();
        for seed in 0..n {
            if visited[seed] {
                continue;
            }
            visited[seed] = true;
            let neighbors = region(seed);
            if neighbors.len() < min_pts {
                continue;
            }
            let cluster = members.len() as i32;
            assignment[seed] = cluster;
            let mut cluster_members = vec![seed];
            let mut queue: std::collections::VecDeque<usize> = neighbors.into();
            while let Some(q) = queue.pop_front() {
                if assignment[q] < 0 {
                    assignment[q] = cluster;
                    cluster_members.push(q);
                }
                if visited[q] {
                    continue;
                }
                visited[q] = true;
                let qn = region(q);
                if qn.len() >= min_pts {
                    queue.extend(qn);
                }
            }
            cluster_members.sort_unstable();
            members.push(cluster_members);
        }
        ClusterSet {
            assignment,
            members,
        }
    }
}
