//! Flat `key = value` pipeline configuration with documented defaults.
//!
//! Lines starting with `#` are comments; unknown keys are rejected. Every
//! field of [`PipelineConfig`] has a default, so an empty file is valid.

use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::{ClassMap, CoarseLabel, TransferConfig};
use crate::synth::{benchmark_scene, static_scene, truncation_scene, SceneConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    // model
    pub d_model: usize,
    pub layers: usize,
    pub knn_k: usize,
    pub groups: usize,
    pub tce_knn: usize,
    pub rho: f64,
    /// Grid resolution of the temporal-fusion planes (finer than the
    /// backbone grid: fused features replace point features per cell).
    pub mtf_rho: f64,
    pub max_grid: usize,
    // temporal window
    pub history: usize,
    pub temporal_stride: usize,
    pub voxel_cell: f64,
    // label transfer voxels
    pub nonground_cell: [f64; 3],
    pub ground_cell: [f64; 3],
    // clustering
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
    // training
    pub lr: f64,
    /// Stage-2 learning rate; 0 means: use `lr`.
    pub lr_stage2: f64,
    pub weight_decay: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub train_frames: usize,
    pub seed: u64,
    // classes: fine ids in model-index order; motion classes are {static, moving}
    pub class_ids: Vec<u16>,
    /// Overrides of the built-in SemanticKITTI coarse mapping, as
    /// `coarse.<fine id> = foreground|background|roadlike` lines.
    pub coarse_overrides: Vec<(u16, CoarseLabel)>,
    // scene generation
    pub scene_preset: String,
    pub scene_frames: usize,
    pub scene_points_per_frame: usize,
    // switches (CLI flags override)
    pub disable_cluster_branch: bool,
    pub disable_mtf: bool,
    pub oracle_history: bool,
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            d_model: 32,
            layers: 6,
            knn_k: 8,
            groups: 4,
            tce_knn: 4,
            rho: 1.0,
            mtf_rho: 0.5,
            max_grid: 64,
            history: 2,
            temporal_stride: 1,
            voxel_cell: 0.1,
            nonground_cell: [0.2, 0.2, 0.2],
            ground_cell: [10.0, 10.0, 0.2],
            dbscan_eps: 0.7,
            dbscan_min_pts: 10,
            lr: 2e-3,
            lr_stage2: 5e-4,
            weight_decay: 0.003,
            epochs_stage1: 30,
            epochs_stage2: 30,
            train_frames: 32,
            seed: 0,
            class_ids: vec![10, 18, 30, 40, 50, 70],
            coarse_overrides: Vec::new(),
            scene_preset: "benchmark".to_string(),
            scene_frames: 40,
            scene_points_per_frame: 1000,
            disable_cluster_branch: false,
            disable_mtf: false,
            oracle_history: false,
            threads: 0,
        }
    }
}

impl PipelineConfig {
    pub fn c_sem(&self) -> usize {
        self.class_ids.len()
    }

    pub fn c_mov(&self) -> usize {
        2
    }

    /// Model index of the moving motion class.
    pub fn moving_index(&self) -> usize {
        1
    }

    pub fn class_index(&self, fine: u16) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == fine)
    }

    pub fn transfer_config(&self) -> TransferConfig {
        TransferConfig {
            nonground_cell: self.nonground_cell,
            ground_cell: self.ground_cell,
        }
    }

    pub fn class_map(&self) -> ClassMap {
        let mut map = ClassMap::semantic_kitti_default();
        for &(fine, coarse) in &self.coarse_overrides {
            map.insert(fine, coarse);
        }
        map
    }

    /// Scene description for `synth`, selected by preset name.
    pub fn scene(&self, seed: u64) -> Result<SceneConfig> {
        match self.scene_preset.as_str() {
            "benchmark" => Ok(benchmark_scene(
                seed,
                self.scene_frames,
                self.scene_points_per_frame,
            )),
            "truncation" => Ok(truncation_scene(
                seed,
                self.scene_frames,
                self.scene_points_per_frame,
            )),
            "static" => Ok(static_scene(
                seed,
                self.scene_frames,
                self.scene_points_per_frame,
            )),
            other => Err(Error::config(format!("unknown scene preset '{other}'"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "config line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| Error::config(format!("config key '{key}': cannot parse '{value}'")))
        }
        fn triple(key: &str, value: &str) -> Result<[f64; 3]> {
            let parts: Vec<f64> = value
                .split(',')
                .map(|s| p::<f64>(key, s.trim()))
                .collect::<Result<_>>()?;
            if parts.len() != 3 {
                return Err(Error::config(format!(
                    "config key '{key}': expected three values"
                )));
            }
            Ok([parts[0], parts[1], parts[2]])
        }
        match key {
            "d_model" => self.d_model = p(key, value)?,
            "layers" => self.layers = p(key, value)?,
            "knn_k" => self.knn_k = p(key, value)?,
            "groups" => self.groups = p(key, value)?,
            "tce_knn" => self.tce_knn = p(key, value)?,
            "rho" => self.rho = p(key, value)?,
            "mtf_rho" => self.mtf_rho = p(key, value)?,
            "max_grid" => self.max_grid = p(key, value)?,
            "history" => self.history = p(key, value)?,
            "temporal_stride" => self.temporal_stride = p(key, value)?,
            "voxel_cell" => self.voxel_cell = p(key, value)?,
            "nonground_cell" => self.nonground_cell = triple(key, value)?,
            "ground_cell" => self.ground_cell = triple(key, value)?,
            "dbscan_eps" => self.dbscan_eps = p(key, value)?,
            "dbscan_min_pts" => self.dbscan_min_pts = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "lr_stage2" => self.lr_stage2 = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "epochs_stage1" => self.epochs_stage1 = p(key, value)?,
            "epochs_stage2" => self.epochs_stage2 = p(key, value)?,
            "train_frames" => self.train_frames = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "class_ids" => {
                self.class_ids = value
                    .split(',')
                    .map(|s| p::<u16>(key, s.trim()))
                    .collect::<Result<_>>()?;
            }
            "scene_preset" => self.scene_preset = value.to_string(),
            "scene_frames" => self.scene_frames = p(key, value)?,
            "scene_points_per_frame" => self.scene_points_per_frame = p(key, value)?,
            "disable_cluster_branch" => self.disable_cluster_branch = p(key, value)?,
            "disable_mtf" => self.disable_mtf = p(key, value)?,
            "oracle_history" => self.oracle_history = p(key, value)?,
            "threads" => self.threads = p(key, value)?,
            key if key.starts_with("coarse.") => {
                let fine: u16 = key["coarse.".len()..]
                    .parse()
                    .map_err(|_| Error::config(format!("bad fine class id in '{key}'")))?;
                let coarse = match value {
                    "foreground" => CoarseLabel::Foreground,
                    "background" => CoarseLabel::Background,
                    "roadlike" => CoarseLabel::RoadLike,
                    other => {
                        return Err(Error::config(format!(
                            "coarse bucket must be foreground|background|roadlike, got '{other}'"
                        )));
                    }
                };
                self.coarse_overrides.push((fine, coarse));
            }
            unknown => {
                return Err(Error::config(format!("unknown config key '{unknown}'")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.groups != 0 {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of groups {}",
                self.d_model, self.groups
            )));
        }
        if self.knn_k == 0 || self.tce_knn == 0 {
            return Err(Error::config(
                "knn_k and tce_knn must be at least 1".to_string(),
            ));
        }
        if self.rho <= 0.0 || self.mtf_rho <= 0.0 || self.voxel_cell <= 0.0 {
            return Err(Error::config(
                "rho, mtf_rho and voxel_cell must be positive".to_string(),
            ));
        }
        if self.dbscan_eps <= 0.0 || self.dbscan_min_pts == 0 {
            return Err(Error::config(
                "dbscan parameters must be positive".to_string(),
            ));
        }
        if self.nonground_cell.iter().any(|&v| v <= 0.0)
            || self.ground_cell.iter().any(|&v| v <= 0.0)
        {
            return Err(Error::config(
                "label-transfer voxel dims must be positive".to_string(),
            ));
        }
        if self.class_ids.is_empty() {
            return Err(Error::config("class_ids must not be empty".to_string()));
        }
        if self.temporal_stride == 0 {
            return Err(Error::config(
                "temporal_stride must be at least 1".to_string(),
            ));
        }
        let map = self.class_map();
        for &id in &self.class_ids {
            if map.get(id).is_none() {
                return Err(Error::config(format!(
                    "class id {id} has no coarse mapping"
                )));
            }
        }
        Ok(())
    }

    /// Coarse bucket of a model class index under the default class map.
    pub fn coarse_of_index(&self, index: usize) -> CoarseLabel {
        self.class_map()
            .get(self.class_ids[index])
            .unwrap_or(CoarseLabel::Background)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_round_trip_of_known_keys() {
        let cfg = PipelineConfig::parse_str(
            "# a comment\n\
             d_model = 16\n\
             layers=3\n\
             ground_cell = 8.0, 8.0, 0.3\n\
             seed = 99\n\
             scene_preset = truncation\n",
        )
        .unwrap();
        assert_eq!(cfg.d_model, 16);
        assert_eq!(cfg.layers, 3);
        assert_eq!(cfg.ground_cell, [8.0, 8.0, 0.3]);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.scene_preset, "truncation");
    }

    #[test]
    fn unknown_key_is_named_in_error() {
        let err = PipelineConfig::parse_str("frobnicate = 3\n").unwrap_err();
        assert!(err.to_string().contains("frobnicate"));
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn bad_value_is_config_error() {
        assert!(PipelineConfig::parse_str("d_model = banana\n").is_err());
        assert!(PipelineConfig::parse_str("d_model = 30\ngroups = 4\n").is_err());
    }

    #[test]
    fn empty_config_is_default() {
        let cfg = PipelineConfig::parse_str("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
    }

    #[test]
    fn coarse_override_reshapes_the_class_map() {
        let cfg = PipelineConfig::parse_str("coarse.70 = foreground\n").unwrap();
        assert_eq!(cfg.class_map().get(70), Some(CoarseLabel::Foreground));
        // untouched ids keep the built-in default
        assert_eq!(cfg.class_map().get(40), Some(CoarseLabel::RoadLike));
        assert!(PipelineConfig::parse_str("coarse.70 = purple\n").is_err());
        assert!(PipelineConfig::parse_str("coarse.x = foreground\n").is_err());
    }
}
