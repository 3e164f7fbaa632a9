//! Evaluation metrics: per-class IoU / mIoU from a confusion matrix, the
//! moving-class IoU used for motion segmentation, and the per-instance
//! prediction-consistency diagnostic.

use serde::Serialize;

use crate::error::{Error, Result};

/// `C x C` count matrix indexed `[target][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_predictions(preds: &[usize], targets: &[usize], classes: usize) -> Result<Self> {
        let mut m = ConfusionMatrix::new(classes);
        m.add(preds, targets)?;
        Ok(m)
    }

    pub fn add(&mut self, preds: &[usize], targets: &[usize]) -> Result<()> {
        if preds.len() != targets.len() {
            return Err(Error::data(format!(
                "confusion: {} predictions vs {} targets",
                preds.len(),
                targets.len()
            )));
        }
        for (&p, &t) in preds.iter().zip(targets) {
            if p >= self.classes || t >= self.classes {
                return Err(Error::data(format!(
                    "confusion: class ({t},{p}) out of range {}",
                    self.classes
                )));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn count(&self, target: usize, pred: usize) -> u64 {
        self.counts[target * self.classes + pred]
    }

    /// TP / (TP + FP + FN) for one class; `None` when the denominator is 0.
    pub fn iou_of(&self, class: usize) -> Option<f64> {
        let tp = self.count(class, class);
        let fp: u64 = (0..self.classes)
            .filter(|&t| t != class)
            .map(|t| self.count(t, class))
            .sum();
        let fn_: u64 = (0..self.classes)
            .filter(|&p| p != class)
            .map(|p| self.count(class, p))
            .sum();
        let denom = tp + fp + fn_;
        if denom == 0 {
            None
        } else {
            Some(tp as f64 / denom as f64)
        }
    }
}

/// Per-class IoU plus the mean over classes that appear at all.
#[derive(Debug, Clone, Serialize)]
pub struct IouReport {
    /// `None` marks classes absent from both predictions and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Per-class IoU and mIoU. Classes with an empty denominator (absent from
/// both predictions and ground truth) are excluded from the mean.
pub fn compute_iou(confusion: &ConfusionMatrix) -> Result<IouReport> {
    if confusion.total() == 0 {
        return Err(Error::data(
            "compute_iou: empty confusion matrix".to_string(),
        ));
    }
    let per_class: Vec<Option<f64>> = (0..confusion.classes())
        .map(|c| confusion.iou_of(c))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport { per_class, miou })
}

/// Fraction of ground-truth instances (id >= 0) whose predicted semantic
/// labels are unanimous across member points. `None` when there are no
/// instances to judge.
pub fn consistency_metric(predictions: &[usize], gt_instance: &[i32]) -> Result<Option<f64>> {
    if predictions.len() != gt_instance.len() {
        return Err(Error::data(format!(
            "consistency: {} predictions vs {} instance ids",
            predictions.len(),
            gt_instance.len()
        )));
    }
    let mut first: std::collections::HashMap<i32, usize> = std::collections::HashMap::new();
    let mut unanimous: std::collections::HashMap<i32, bool> = std::collections::HashMap::new();
    for (&p, &inst) in predictions.iter().zip(gt_instance) {
        if inst < 0 {
            continue;
        }
        match first.get(&inst) {
            None => {
                first.insert(inst, p);
                unanimous.insert(inst, true);
            }
            Some(&f) => {
                if f != p {
                    unanimous.insert(inst, false);
                }
            }
        }
    }
    if unanimous.is_empty() {
        return Ok(None);
    }
    let ok = unanimous.values().filter(|&&u| u).count();
    Ok(Some(ok as f64 / unanimous.len() as f64))
}

/// Machine-readable evaluation report (also rendered as text by the CLI).
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub class_ids: Vec<u16>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub iou_moving: Option<f64>,
    pub consistency: Option<f64>,
    pub frames: usize,
    pub points: u64,
    pub wall_ms: f64,
}

impl MetricsReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str("per-class IoU:\n");
        for (id, iou) in self.class_ids.iter().zip(&self.per_class_iou) {
            match iou {
                Some(v) => out.push_str(&format!("  class {id:>3}: {v:.4}\n")),
                None => out.push_str(&format!("  class {id:>3}: (absent)\n")),
            }
        }
        out.push_str(&format!("mIoU: {:.4}\n", self.miou));
        match self.iou_moving {
            Some(v) => out.push_str(&format!("IoU (moving): {v:.4}\n")),
            None => out.push_str("IoU (moving): (absent)\n"),
        }
        match self.consistency {
            Some(v) => out.push_str(&format!("instance consistency: {v:.4}\n")),
            None => out.push_str("instance consistency: (no instances)\n"),
        }
        out.push_str(&format!(
            "frames: {}  points: {}  wall: {:.1} ms\n",
            self.frames, self.points, self.wall_ms
        ));
        out
    }
}
