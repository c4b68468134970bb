//! Pixel-level and tree-level evaluation: confusion counts, precision /
//! recall / F1 / accuracy, greedy IoU matching of detections to annotation
//! boxes, and micro-averaged aggregation across images.

use std::path::Path;

use crate::data::{AnnotationBox, ClassMap};
use crate::detection::{DetectionSet, SegmentationMap};
use crate::error::{Error, Result};

/// Raw confusion counts; `n()` is the entity total and `n_correct()` the
/// correctly classified entities (TP + TN).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn n(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn n_correct(&self) -> u64 {
        self.true_pos + self.true_neg
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }
}

/// Precision, recall, F1 and (for pixel-level evaluation only) accuracy, all
/// in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` for tree-level rows: detections have no true-negative notion.
    pub accuracy: Option<f64>,
}

/// Derive the metric row from counts. Zero-denominator conventions keep the
/// metrics total: precision (or recall) is 0 when its denominator is 0, and
/// F1 is 0 when precision + recall is 0.
pub fn metrics_from_counts(c: &ConfusionCounts, with_accuracy: bool) -> MetricRow {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.true_pos, c.true_pos + c.false_pos);
    let recall = ratio(c.true_pos, c.true_pos + c.false_neg);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let accuracy = with_accuracy.then(|| ratio(c.n_correct(), c.n()));
    MetricRow { precision, recall, f1, accuracy }
}

/// Pixel-level evaluation with mango as the positive class. Any non-mango
/// prediction (background or boundary) counts as negative, mirroring the
/// 2-class view of the ground truth.
pub fn pixel_metrics(pred: &SegmentationMap, truth: &ClassMap) -> Result<(ConfusionCounts, MetricRow)> {
    if pred.h != truth.h || pred.w != truth.w {
        return Err(Error::shape(
            "pixel_metrics",
            format!("prediction {}x{} vs truth {}x{}", pred.h, pred.w, truth.h, truth.w),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        match (p == 1, t == 1) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    let row = metrics_from_counts(&c, true);
    Ok((c, row))
}

/// Intersection-over-union of two inclusive pixel boxes.
pub fn iou(a: &AnnotationBox, b: &AnnotationBox) -> f64 {
    let span = |amin: usize, amax: usize, bmin: usize, bmax: usize| -> usize {
        let lo = amin.max(bmin);
        let hi = amax.min(bmax);
        (hi + 1).saturating_sub(lo)
    };
    let inter = span(a.xmin, a.xmax, b.xmin, b.xmax) * span(a.ymin, a.ymax, b.ymin, b.ymax);
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / (a.area() + b.area() - inter) as f64
}

/// Greedy one-to-one matching by descending IoU: a detection is a true
/// positive when it claims an unclaimed truth box with IoU ≥ `iou_min`;
/// leftover detections are false positives, leftover truths false negatives.
/// Tree-level counts have no true negatives.
pub fn match_detections(pred: &DetectionSet, truth: &[AnnotationBox], iou_min: f64) -> ConfusionCounts {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, d) in pred.detections.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let v = iou(&d.bbox, t);
            if v >= iou_min {
                candidates.push((v, i, j));
            }
        }
    }
    // Descending IoU; index order breaks exact ties deterministically.
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_taken = vec![false; pred.detections.len()];
    let mut truth_taken = vec![false; truth.len()];
    let mut tp = 0u64;
    for (_, i, j) in candidates {
        if !pred_taken[i] && !truth_taken[j] {
            pred_taken[i] = true;
            truth_taken[j] = true;
            tp += 1;
        }
    }
    ConfusionCounts {
        true_pos: tp,
        false_pos: pred.detections.len() as u64 - tp,
        false_neg: truth.len() as u64 - tp,
        true_neg: 0,
    }
}

/// Micro-average: sum counts across images, then apply the metric formulas
/// once to the totals.
pub fn aggregate(counts: &[ConfusionCounts], with_accuracy: bool) -> Result<MetricRow> {
    if counts.is_empty() {
        return Err(Error::invalid("aggregate", "need at least one image"));
    }
    let mut total = ConfusionCounts::default();
    for c in counts {
        total.add(c);
    }
    Ok(metrics_from_counts(&total, with_accuracy))
}

pub const METRICS_CSV_HEADER: &str = "image_id,precision,recall,f1,accuracy";

/// One CSV row at 4 decimal places; the accuracy field is left blank for
/// tree-level rows.
pub fn metrics_csv_row(image_id: &str, row: &MetricRow) -> String {
    let acc = row
        .accuracy
        .map(|a| format!("{a:.4}"))
        .unwrap_or_default();
    format!(
        "{image_id},{:.4},{:.4},{:.4},{acc}",
        row.precision, row.recall, row.f1
    )
}

pub fn write_metrics_csv(path: &Path, rows: &[(String, MetricRow)]) -> Result<()> {
    let mut text = String::from(METRICS_CSV_HEADER);
    text.push('\n');
    for (id, row) in rows {
        text.push_str(&metrics_csv_row(id, row));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
