//! Shared fixture builders for the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cluseg_core::pointcloud::{Point5, StackedCloud};

/// Blobby point cloud resembling a downsampled stacked scan.
pub fn scene_cloud(n: usize, seed: u64) -> StackedCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            Point5::new(
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(-0.2..3.0),
                rng.random_range(0.0..1.0),
            )
        })
        .collect();
    StackedCloud {
        points,
        source_offset: vec![0; n],
    }
}

/// Cluster-friendly blob layout for DBSCAN benchmarks.
pub fn blob_coords(blobs: usize, per_blob: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(blobs * per_blob);
    for b in 0..blobs {
        let center = [(b % 8) as f64 * 10.0, (b / 8) as f64 * 10.0, 0.0];
        for _ in 0..per_blob {
            out.push([
                center[0] + rng.random_range(-1.0..1.0),
                center[1] + rng.random_range(-1.0..1.0),
                rng.random_range(-0.3..0.3),
            ]);
        }
    }
    out
}
