//! Dual-branch spatio-temporal LiDAR semantic segmentation with explicit
//! cluster priors.
//!
//! The pipeline stacks pose-aligned scans, extracts per-point features with a
//! plane-mixing backbone, enriches them with the previous frame's features
//! (multi-view temporal fusion), clusters foreground evidence with DBSCAN to
//! form an instance branch (temporal cluster enhancement), and blends the two
//! branches' predictions per point with learned confidences. Training,
//! metrics and a deterministic synthetic dataset generator are included.

pub mod backbone;
pub mod cluster;
pub mod cluster_branch;
pub mod config;
pub mod error;
pub mod fusion;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod mtf;
pub mod pointcloud;
pub mod spatial;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
