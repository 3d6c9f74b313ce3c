//! Temporal IoU, average precision and feature-similarity diagnostics.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::tensor::Tensor;

/// Thresholds `0.3, 0.4, …, 0.7`.
pub const THRESHOLDS_MID: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

/// A ground-truth instance in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub label: usize,
}

/// Intersection over union of two intervals, 0 when disjoint or degenerate.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// AP of one class. Detections are ranked by score (stable for ties), each is
/// matched to the unmatched ground truth of the same video with the highest
/// tIoU, provided it reaches `threshold`. Returns `None` when `gts` is empty.
pub fn average_precision(dets: &[&Detection], gts: &[&GroundTruth], threshold: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut by_video: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_video.entry(g.video_id.as_str()).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));

    let mut matched = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(order.len());
    for &d in &order {
        let det = dets[d];
        let mut best: Option<(f64, usize)> = None;
        for &gi in by_video.get(det.video_id.as_str()).map_or(&[][..], |v| v) {
            if matched[gi] {
                continue;
            }
            let iou = tiou((det.start, det.end), (gts[gi].start, gts[gi].end));
            if iou >= threshold && best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, gi));
            }
        }
        if let Some((_, gi)) = best {
            matched[gi] = true;
        }
        hits.push(best.is_some());
    }
    Some(interpolated_ap(&hits, gts.len()))
}

/// All-point interpolated AP of a ranked hit list.
fn interpolated_ap(hits: &[bool], num_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub map: f64,
    /// AP per class that has ground truth.
    pub class_ap: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<ThresholdResult>,
    pub average_map: f64,
    pub num_ground_truth: usize,
    pub num_detections: usize,
}

impl EvalReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .find(|t| (t.threshold - threshold).abs() < 1e-12)
            .map(|t| t.map)
    }
}

/// mAP per threshold over classes with ground truth, and its mean over the
/// thresholds. A threshold with no evaluable class scores 0.
pub fn map_report(dets: &[Detection], gts: &[GroundTruth], thresholds: &[f64]) -> EvalReport {
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.label).collect();
    let results: Vec<ThresholdResult> = thresholds
        .iter()
        .map(|&threshold| {
            let class_ap: BTreeMap<usize, f64> = classes
                .iter()
                .filter_map(|&c| {
                    let d: Vec<&Detection> = dets.iter().filter(|d| d.label == c).collect();
                    let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.label == c).collect();
                    average_precision(&d, &g, threshold).map(|ap| (c, ap))
                })
                .collect();
            let map = if class_ap.is_empty() {
                0.0
            } else {
                class_ap.values().sum::<f64>() / class_ap.len() as f64
            };
            ThresholdResult { threshold, map, class_ap }
        })
        .collect();
    let average_map = if results.is_empty() {
        0.0
    } else {
        results.iter().map(|r| r.map).sum::<f64>() / results.len() as f64
    };
    EvalReport {
        thresholds: results,
        average_map,
        num_ground_truth: gts.len(),
        num_detections: dets.len(),
    }
}

/// Cosine similarity between the columns of a `[C × T]` feature map.
/// Zero columns are similar to nothing but themselves.
pub fn similarity_matrix(f: &Tensor) -> Tensor {
    let (c, t) = (f.rows(), f.cols());
    let norms: Vec<f64> = (0..t)
        .map(|j| (0..c).map(|i| f.at(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut s = Tensor::zeros(&[t, t]);
    for a in 0..t {
        for b in a..t {
            let v = if a == b {
                1.0
            } else if norms[a] == 0.0 || norms[b] == 0.0 {
                0.0
            } else {
                (0..c).map(|i| f.at(i, a) * f.at(i, b)).sum::<f64>() / (norms[a] * norms[b])
            };
            s.data_mut()[a * t + b] = v;
            s.data_mut()[b * t + a] = v;
        }
    }
    s
}

/// Mean of the off-diagonal entries of a square matrix; 0 for `1 × 1`.
pub fn mean_off_diagonal(s: &Tensor) -> f64 {
    let n = s.rows();
    if n < 2 {
        return 0.0;
    }
    let diag: f64 = (0..n).map(|i| s.at(i, i)).sum();
    (s.sum() - diag) / (n * (n - 1)) as f64
}
