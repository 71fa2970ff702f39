//! Page-level and element-level retrieval metrics.

use std::collections::BTreeSet;

use doclens_core::document::BBox;
use serde::{Deserialize, Serialize};

/// Precision, recall and F1 with their counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrfCounts {
    /// Metrics from counts. With nothing predicted and nothing expected all
    /// three scores are 1.0; with exactly one side empty they are 0.0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let predicted = tp + fp;
        let expected = tp + fn_;
        let (precision, recall, f1) = match (predicted, expected) {
            (0, 0) => (1.0, 1.0, 1.0),
            (0, _) | (_, 0) => (0.0, 0.0, 0.0),
            _ => {
                let p = tp as f64 / predicted as f64;
                let r = tp as f64 / expected as f64;
                let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
                (p, r, f1)
            }
        };
        PrfCounts {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

pub type PageMetrics = PrfCounts;

pub fn page_metrics(pred: &BTreeSet<u32>, gt: &BTreeSet<u32>) -> PageMetrics {
    let tp = pred.intersection(gt).count();
    PrfCounts::from_counts(tp, pred.len() - tp, gt.len() - tp)
}

/// Intersection over union; 0.0 for disjoint or touching boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElementMatch {
    pub pred_index: usize,
    pub gt_index: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementMatchResult {
    pub matches: Vec<ElementMatch>,
    #[serde(flatten)]
    pub metrics: PrfCounts,
}

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Greedy one-to-one matching: candidate pairs with IoU >= `threshold` are
/// taken in descending IoU order, ties by ascending (gt index, pred index),
/// skipping boxes already matched.
pub fn match_elements(pred: &[BBox], gt: &[BBox], threshold: f64) -> ElementMatchResult {
    assert!(threshold > 0.0 && threshold <= 1.0, "threshold must be in (0, 1]");
    let mut pairs: Vec<ElementMatch> = Vec::new();
    for (gt_index, g) in gt.iter().enumerate() {
        for (pred_index, p) in pred.iter().enumerate() {
            let v = iou(p, g);
            if v >= threshold {
                pairs.push(ElementMatch {
                    pred_index,
                    gt_index,
                    iou: v,
                });
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.iou
            .total_cmp(&a.iou)
            .then(a.gt_index.cmp(&b.gt_index))
            .then(a.pred_index.cmp(&b.pred_index))
    });
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut matches = Vec::new();
    for m in pairs {
        if pred_used[m.pred_index] || gt_used[m.gt_index] {
            continue;
        }
        pred_used[m.pred_index] = true;
        gt_used[m.gt_index] = true;
        matches.push(m);
    }
    let tp = matches.len();
    ElementMatchResult {
        metrics: PrfCounts::from_counts(tp, pred.len() - tp, gt.len() - tp),
        matches,
    }
}
