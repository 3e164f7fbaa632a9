//! Property tests of the core invariants over generated inputs.

use proptest::prelude::*;

use cluseg_core::cluster::{dbscan, filter_foreground};
use cluseg_core::labels::{assign_nonground, CoarseLabel};
use cluseg_core::pointcloud::{transform_points, voxel_downsample, Point5, Pose, StackedCloud};
use cluseg_core::tensor::{Tape, Tensor};

fn arb_point() -> impl Strategy<Value = Point5> {
    (-50.0f64..50.0, -50.0f64..50.0, -5.0f64..5.0, 0.0f64..1.0)
        .prop_map(|(x, y, z, i)| Point5::new(x, y, z, i))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transform_round_trip_recovers_points(
        points in proptest::collection::vec(arb_point(), 1..60),
        angle in -3.1f64..3.1,
        tx in -20.0f64..20.0,
        ty in -20.0f64..20.0,
        tz in -2.0f64..2.0,
    ) {
        let pose = Pose::rot_z(angle).compose(&Pose::translation([tx, ty, tz]));
        let there = transform_points(&points, &pose).unwrap();
        let back = transform_points(&there, &pose.inverse()).unwrap();
        for (p, q) in points.iter().zip(&back) {
            prop_assert!((p.x - q.x).abs() < 1e-6);
            prop_assert!((p.y - q.y).abs() < 1e-6);
            prop_assert!((p.z - q.z).abs() < 1e-6);
            // range invariant holds after every move
            let r = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
            prop_assert!((q.range - r).abs() <= 1e-6 * r.max(1.0));
        }
    }

    #[test]
    fn voxel_downsample_is_idempotent_and_bounded(
        points in proptest::collection::vec(arb_point(), 1..120),
        cell in 0.05f64..2.0,
    ) {
        let n = points.len();
        let cloud = StackedCloud { points, source_offset: vec![0; n] };
        let once = voxel_downsample(&cloud, cell).unwrap();
        prop_assert!(once.len() <= cloud.len());
        let twice = voxel_downsample(&once, cell).unwrap();
        prop_assert_eq!(once.points, twice.points);
    }

    #[test]
    fn softmax_rows_always_normalize(
        rows in 1usize..6,
        cols in 2usize..7,
        scale in 0.1f64..30.0,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![rows, cols], data).unwrap());
        let y = x.softmax(1).unwrap().value();
        for i in 0..rows {
            let sum: f64 = y.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(y.row(i).iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn filter_foreground_only_shrinks_and_preserves_membership(
        coords in proptest::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 5..80),
        labels_seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let pts: Vec<[f64; 3]> = coords.iter().map(|&(x, y)| [x, y, 0.0]).collect();
        let clusters = dbscan(&pts, 1.5, 2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(labels_seed);
        let labels: Vec<CoarseLabel> = (0..pts.len())
            .map(|_| match rng.random_range(0..3u8) {
                0 => CoarseLabel::Foreground,
                1 => CoarseLabel::Unlabeled,
                _ => CoarseLabel::Background,
            })
            .collect();
        let kept = filter_foreground(&clusters, &labels).unwrap();
        prop_assert!(kept.num_clusters() <= clusters.num_clusters());
        // every surviving cluster's membership equals some original cluster's
        for m in &kept.members {
            prop_assert!(clusters.members.iter().any(|orig| orig == m));
        }
    }

    #[test]
    fn voting_never_assigns_road_in_nonground_pass(
        history in proptest::collection::vec(
            ((-5.0f64..5.0, -5.0f64..5.0, -1.0f64..1.0), 0u8..2),
            1..100,
        ),
        queries in proptest::collection::vec(arb_point(), 1..40),
    ) {
        let history: Vec<([f64; 3], CoarseLabel)> = history
            .into_iter()
            .map(|((x, y, z), l)| {
                let label = if l == 0 { CoarseLabel::Foreground } else { CoarseLabel::Background };
                ([x, y, z], label)
            })
            .collect();
        let out = assign_nonground(&queries, &history, [0.2, 0.2, 0.2]).unwrap();
        prop_assert_eq!(out.len(), queries.len());
        for l in out {
            prop_assert!(l != CoarseLabel::RoadLike);
        }
    }
}
