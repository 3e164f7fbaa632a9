//! Transfer of historical per-point semantic predictions onto current-frame
//! points via two-pass voxel max-voting.
//!
//! Pass one assigns non-ground labels with small cubic voxels; pass two fills
//! remaining unlabeled points with road-like labels using large, flat voxels.
//! Vote ties resolve by the fixed priority Foreground > Background > RoadLike:
//! a spurious foreground point only costs an extra cluster downstream, while a
//! spurious background vote can erase a real object before clustering.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pointcloud::Point5;

/// Coarse taxonomy used for label transfer and cluster filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoarseLabel {
    Unlabeled,
    Background,
    Foreground,
    RoadLike,
}

impl CoarseLabel {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            CoarseLabel::Unlabeled => 0,
            CoarseLabel::Background => 1,
            CoarseLabel::Foreground => 2,
            CoarseLabel::RoadLike => 3,
        }
    }

    pub fn from_index(i: u8) -> Option<CoarseLabel> {
        match i {
            0 => Some(CoarseLabel::Unlabeled),
            1 => Some(CoarseLabel::Background),
            2 => Some(CoarseLabel::Foreground),
            3 => Some(CoarseLabel::RoadLike),
            _ => None,
        }
    }

    /// Tie-break priority; higher wins at equal vote counts.
    fn priority(self) -> u8 {
        match self {
            CoarseLabel::Foreground => 3,
            CoarseLabel::Background => 2,
            CoarseLabel::RoadLike => 1,
            CoarseLabel::Unlabeled => 0,
        }
    }
}

/// Total mapping from fine semantic class ids to the coarse taxonomy.
#[derive(Debug, Clone)]
pub struct ClassMap {
    map: HashMap<u16, CoarseLabel>,
}

impl ClassMap {
    pub fn new(entries: impl IntoIterator<Item = (u16, CoarseLabel)>) -> Self {
        ClassMap {
            map: entries.into_iter().collect(),
        }
    }

    /// SemanticKITTI-convention default: road-family classes are road-like,
    /// movable-object classes are foreground, the rest background.
    pub fn semantic_kitti_default() -> Self {
        use CoarseLabel::*;
        let mut map = HashMap::new();
        // movable objects
        for id in [10u16, 11, 13, 15, 18, 20, 30, 31, 32] {
            map.insert(id, Foreground);
        }
        // road / parking / sidewalk / other-ground
        for id in [40u16, 44, 48, 49] {
            map.insert(id, RoadLike);
        }
        // structures and nature
        for id in [0u16, 1, 50, 51, 52, 60, 70, 71, 72, 80, 81, 99] {
            map.insert(id, Background);
        }
        ClassMap { map }
    }

    pub fn get(&self, fine: u16) -> Option<CoarseLabel> {
        self.map.get(&fine).copied()
    }

    pub fn insert(&mut self, fine: u16, coarse: CoarseLabel) {
        self.map.insert(fine, coarse);
    }
}

/// Sparse voxel vote accumulator.
#[derive(Debug, Default)]
pub struct VoteGrid {
    cell: [f64; 3],
    votes: HashMap<(i64, i64, i64), [u32; CoarseLabel::COUNT]>,
}

impl VoteGrid {
    pub fn new(cell: [f64; 3]) -> Result<Self> {
        if cell.iter().any(|&c| c <= 0.0) {
            return Err(Error::config(format!(
                "voxel dims must be positive, got {cell:?}"
            )));
        }
        Ok(VoteGrid {
            cell,
            votes: HashMap::new(),
        })
    }

    fn key(&self, p: [f64; 3]) -> (i64, i64, i64) {
        (
            (p[0] / self.cell[0]).floor() as i64,
            (p[1] / self.cell[1]).floor() as i64,
            (p[2] / self.cell[2]).floor() as i64,
        )
    }

    pub fn add_vote(&mut self, p: [f64; 3], label: CoarseLabel) {
        let key = self.key(p);
        self.votes.entry(key).or_insert([0; CoarseLabel::COUNT])[label.index()] += 1;
    }

    /// Winning label of the voxel containing `p`, if any point voted there.
    pub fn winner(&self, p: [f64; 3]) -> Option<CoarseLabel> {
        let counts = self.votes.get(&self.key(p))?;
        Some(argmax_label(counts))
    }

    pub fn occupied(&self) -> usize {
        self.votes.len()
    }
}

/// Argmax over vote counts with the documented tie-break priority.
fn argmax_label(counts: &[u32; CoarseLabel::COUNT]) -> CoarseLabel {
    let labels = [
        CoarseLabel::Unlabeled,
        CoarseLabel::Background,
        CoarseLabel::Foreground,
        CoarseLabel::RoadLike,
    ];
    let mut best = CoarseLabel::Unlabeled;
    let mut best_count = 0u32;
    for l in labels {
        let c = counts[l.index()];
        if c > best_count || (c == best_count && c > 0 && l.priority() > best.priority()) {
            best = l;
            best_count = c;
        }
    }
    best
}

/// Element-wise application of the class map; unknown ids are data errors.
pub fn coarse_map(fine_labels: &[u16], map: &ClassMap) -> Result<Vec<CoarseLabel>> {
    fine_labels
        .iter()
        .map(|&id| {
            map.get(id)
                .ok_or_else(|| Error::data(format!("unknown fine class id {id}")))
        })
        .collect()
}

fn build_grid(history: &[([f64; 3], CoarseLabel)], cell: [f64; 3]) -> Result<VoteGrid> {
    let mut grid = VoteGrid::new(cell)?;
    for &(p, label) in history {
        let key = grid.key(p);
        grid.votes.entry(key).or_insert([0; CoarseLabel::COUNT])[label.index()] += 1;
    }
    Ok(grid)
}

/// Pass one: non-ground label assignment. The caller must already have
/// excluded road-like history points.
pub fn assign_nonground(
    current: &[Point5],
    history: &[([f64; 3], CoarseLabel)],
    cell: [f64; 3],
) -> Result<Vec<CoarseLabel>> {
    let grid = build_grid(history, cell)?;
    Ok(current
        .iter()
        .map(|p| grid.winner(p.coords()).unwrap_or(CoarseLabel::Unlabeled))
        .collect())
}

/// Pass two: road-like assignment with large flat voxels, touching only
/// points still unlabeled. `history` must hold road-like points only.
pub fn assign_ground(
    current: &[Point5],
    labels: &[CoarseLabel],
    history: &[([f64; 3], CoarseLabel)],
    cell: [f64; 3],
) -> Result<Vec<CoarseLabel>> {
    if current.len() != labels.len() {
        return Err(Error::data(format!(
            "assign_ground: {} points but {} labels",
            current.len(),
            labels.len()
        )));
    }
    let grid = build_grid(history, cell)?;
    Ok(current
        .iter()
        .zip(labels)
        .map(|(p, &l)| {
            if l != CoarseLabel::Unlabeled {
                return l;
            }
            match grid.winner(p.coords()) {
                Some(_) => CoarseLabel::RoadLike,
                None => CoarseLabel::Unlabeled,
            }
        })
        .collect())
}

/// Voxel sizes for the two voting passes.
#[derive(Debug, Clone, Copy)]
pub struct TransferConfig {
    pub nonground_cell: [f64; 3],
    pub ground_cell: [f64; 3],
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            nonground_cell: [0.2, 0.2, 0.2],
            ground_cell: [10.0, 10.0, 0.2],
        }
    }
}

/// One historical frame: points already transformed into the current frame,
/// with their predicted fine classes.
pub struct HistoryFrame<'a> {
    pub points: &'a [[f64; 3]],
    pub fine_labels: &'a [u16],
}

/// Full transfer: initialize unlabeled, coarse-map history, vote non-ground
/// labels with the small voxels, then fill road-like with the flat voxels.
pub fn transfer_labels(
    current: &[Point5],
    history: &[HistoryFrame<'_>],
    map: &ClassMap,
    cfg: &TransferConfig,
) -> Result<Vec<CoarseLabel>> {
    if history.is_empty() {
        return Err(Error::data(
            "transfer_labels: no historical frames".to_string(),
        ));
    }
    let mut nonground = Vec::new();
    let mut ground = Vec::new();
    for frame in history {
        if frame.points.len() != frame.fine_labels.len() {
            return Err(Error::data(format!(
                "history frame has {} points but {} labels",
                frame.points.len(),
                frame.fine_labels.len()
            )));
        }
        let coarse = coarse_map(frame.fine_labels, map)?;
        for (&p, &l) in frame.points.iter().zip(&coarse) {
            if l == CoarseLabel::RoadLike {
                ground.push((p, l));
            } else {
                nonground.push((p, l));
            }
        }
    }
    let labels = assign_nonground(current, &nonground, cfg.nonground_cell)?;
    assign_ground(current, &labels, &ground, cfg.ground_cell)
}

// --- prediction file IO ------------------------------------------------------

/// Read a prediction file: one little-endian `u32` per point, low 16 bits the
/// fine semantic class, high 16 bits a motion/instance-compatible field.
pub fn read_prediction_file(path: &Path) -> Result<(Vec<u16>, Vec<u16>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() % 4 != 0 {
        return Err(Error::parse(
            buf.len() / 4 * 4,
            format!(
                "label file {} length {} not a multiple of 4",
                path.display(),
                buf.len()
            ),
        ));
    }
    let n = buf.len() / 4;
    let mut fine = Vec::with_capacity(n);
    let mut high = Vec::with_capacity(n);
    for i in 0..n {
        let v = u32::from_le_bytes([buf[4 * i], buf[4 * i + 1], buf[4 * i + 2], buf[4 * i + 3]]);
        fine.push((v & 0xffff) as u16);
        high.push((v >> 16) as u16);
    }
    Ok((fine, high))
}

/// Write a prediction file in the layout [`read_prediction_file`] expects.
pub fn write_prediction_file(path: &Path, fine: &[u16], high: &[u16]) -> Result<()> {
    if fine.len() != high.len() {
        return Err(Error::data(format!(
            "prediction write: {} semantic vs {} motion entries",
            fine.len(),
            high.len()
        )));
    }
    let mut buf = Vec::with_capacity(fine.len() * 4);
    for (&f, &h) in fine.iter().zip(high) {
        buf.extend_from_slice(&(((h as u32) << 16) | f as u32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64, z: f64) -> Point5 {
        Point5::new(x, y, z, 0.0)
    }

    fn test_map() -> ClassMap {
        use CoarseLabel::*;
        ClassMap::new([(10, Foreground), (40, RoadLike), (50, Background)])
    }

    #[test]
    fn coarse_map_applies_elementwise() {
        let got = coarse_map(&[10, 40, 50], &test_map()).unwrap();
        assert_eq!(
            got,
            vec![
                CoarseLabel::Foreground,
                CoarseLabel::RoadLike,
                CoarseLabel::Background
            ]
        );
    }

    #[test]
    fn coarse_map_empty_and_uniform() {
        assert!(coarse_map(&[], &test_map()).unwrap().is_empty());
        let got = coarse_map(&[10; 7], &test_map()).unwrap();
        assert!(got.iter().all(|&l| l == CoarseLabel::Foreground));
    }

    #[test]
    fn coarse_map_unknown_id_names_the_id() {
        let err = coarse_map(&[10, 999], &test_map()).unwrap_err();
        assert!(err.to_string().contains("999"));
    }

    #[test]
    fn nonground_majority_vote_wins() {
        // 3 foreground + 1 background votes in one voxel.
        let history = vec![
            ([0.05, 0.05, 0.05], CoarseLabel::Foreground),
            ([0.06, 0.05, 0.05], CoarseLabel::Foreground),
            ([0.05, 0.06, 0.05], CoarseLabel::Foreground),
            ([0.05, 0.05, 0.06], CoarseLabel::Background),
        ];
        let got = assign_nonground(&[p(0.1, 0.1, 0.1)], &history, [0.2, 0.2, 0.2]).unwrap();
        assert_eq!(got, vec![CoarseLabel::Foreground]);
    }

    #[test]
    fn nonground_empty_voxel_stays_unlabeled() {
        let history = vec![([10.0, 10.0, 0.0], CoarseLabel::Foreground)];
        let got = assign_nonground(&[p(0.0, 0.0, 0.0)], &history, [0.2, 0.2, 0.2]).unwrap();
        assert_eq!(got, vec![CoarseLabel::Unlabeled]);
    }

    #[test]
    fn vote_tie_prefers_foreground() {
        let history = vec![
            ([0.01, 0.0, 0.0], CoarseLabel::Foreground),
            ([0.02, 0.0, 0.0], CoarseLabel::Foreground),
            ([0.03, 0.0, 0.0], CoarseLabel::Background),
            ([0.04, 0.0, 0.0], CoarseLabel::Background),
        ];
        let got = assign_nonground(&[p(0.05, 0.05, 0.05)], &history, [0.2, 0.2, 0.2]).unwrap();
        assert_eq!(got, vec![CoarseLabel::Foreground]);
    }

    #[test]
    fn ground_pass_uses_flat_voxels() {
        let cell = [10.0, 10.0, 0.2];
        let history = vec![([0.0, 0.0, 0.05], CoarseLabel::RoadLike)];
        // 3 m lateral offset, same height band: labeled.
        let labels = vec![CoarseLabel::Unlabeled];
        let got = assign_ground(&[p(3.0, 0.0, 0.1)], &labels, &history, cell).unwrap();
        assert_eq!(got, vec![CoarseLabel::RoadLike]);
        // 0.5 m above: different z voxel, stays unlabeled.
        let got = assign_ground(&[p(3.0, 0.0, 0.55)], &labels, &history, cell).unwrap();
        assert_eq!(got, vec![CoarseLabel::Unlabeled]);
    }

    #[test]
    fn ground_pass_never_overwrites() {
        let cell = [10.0, 10.0, 0.2];
        let history = vec![([0.0, 0.0, 0.05], CoarseLabel::RoadLike)];
        let labels = vec![CoarseLabel::Foreground];
        let got = assign_ground(&[p(0.0, 0.0, 0.05)], &labels, &history, cell).unwrap();
        assert_eq!(got, vec![CoarseLabel::Foreground]);
    }

    #[test]
    fn ground_pass_without_history_is_noop() {
        let labels = vec![CoarseLabel::Unlabeled, CoarseLabel::Background];
        let got = assign_ground(
            &[p(0.0, 0.0, 0.0), p(1.0, 0.0, 0.0)],
            &labels,
            &[],
            [10.0, 10.0, 0.2],
        )
        .unwrap();
        assert_eq!(got, labels);
    }

    #[test]
    fn transfer_composes_both_passes() {
        let map = test_map();
        let history_pts = vec![[0.05, 0.05, 0.05], [5.0, 5.0, 0.05]];
        let history_labels = vec![10u16, 40u16];
        let frames = [HistoryFrame {
            points: &history_pts,
            fine_labels: &history_labels,
        }];
        let current = vec![p(0.1, 0.1, 0.1), p(5.5, 5.5, 0.1), p(50.0, 50.0, 0.0)];
        let got = transfer_labels(&current, &frames, &map, &TransferConfig::default()).unwrap();
        assert_eq!(got[0], CoarseLabel::Foreground);
        assert_eq!(got[1], CoarseLabel::RoadLike);
        assert_eq!(got[2], CoarseLabel::Unlabeled);
    }

    #[test]
    fn voting_is_history_permutation_invariant() {
        let mut history = vec![
            ([0.01, 0.0, 0.0], CoarseLabel::Background),
            ([0.02, 0.0, 0.0], CoarseLabel::Foreground),
            ([0.03, 0.0, 0.0], CoarseLabel::Foreground),
            ([0.19, 0.19, 0.19], CoarseLabel::Background),
            ([0.25, 0.0, 0.0], CoarseLabel::Background),
        ];
        let current = vec![p(0.1, 0.1, 0.1), p(0.3, 0.05, 0.05)];
        let a = assign_nonground(&current, &history, [0.2, 0.2, 0.2]).unwrap();
        history.reverse();
        let b = assign_nonground(&current, &history, [0.2, 0.2, 0.2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_cell_dims_rejected() {
        assert!(matches!(
            assign_nonground(&[], &[], [0.0, 0.2, 0.2]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn prediction_file_round_trip() {
        let dir = std::env::temp_dir().join(format!("cluseg_pred_io_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pred.label");
        let fine = vec![10u16, 40, 50, 30];
        let high = vec![1u16, 0, 0, 1];
        write_prediction_file(&path, &fine, &high).unwrap();
        let (f, h) = read_prediction_file(&path).unwrap();
        assert_eq!(f, fine);
        assert_eq!(h, high);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 16);
        std::fs::remove_dir_all(&dir).ok();
    }
}
