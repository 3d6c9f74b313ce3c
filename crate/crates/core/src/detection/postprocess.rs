use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::evaluation::tiou;
use crate::tensor::Tensor;

use super::{decode, Detection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub score_threshold: f64,
    pub pre_nms_top_k: usize,
    pub sigma: f64,
    pub min_score: f64,
    pub max_detections: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.01,
            pre_nms_top_k: 2000,
            sigma: 0.5,
            min_score: 0.001,
            max_detections: 200,
        }
    }
}

/// Head outputs of one level, detached from the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPrediction {
    /// `[num_classes × T]` probabilities.
    pub probs: Tensor,
    /// `[2 × T]` offsets in stride units.
    pub offsets: Tensor,
    pub stride: usize,
}

fn by_score_desc(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score)
}

/// Gaussian Soft-NMS. Repeatedly keeps the best remaining detection and
/// decays the scores of the others of the same video and class by
/// `exp(−tIoU²/σ)`. Scores falling below `min_score` are dropped.
pub fn soft_nms(mut dets: Vec<Detection>, config: &PostprocessConfig) -> Vec<Detection> {
    let mut kept = Vec::new();
    while kept.len() < config.max_detections && !dets.is_empty() {
        let best = dets
            .iter()
            .enumerate()
            .min_by(|a, b| by_score_desc(a.1, b.1).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
            .expect("non-empty");
        let top = dets.swap_remove(best);
        for d in dets.iter_mut() {
            if d.label == top.label && d.video_id == top.video_id {
                let iou = tiou((top.start, top.end), (d.start, d.end));
                d.score *= (-iou * iou / config.sigma).exp();
            }
        }
        dets.retain(|d| d.score >= config.min_score);
        kept.push(top);
    }
    kept
}

/// Thresholds, decodes, keeps the top-k candidates and applies Soft-NMS.
/// Returns detections sorted by score.
pub fn postprocess(
    video_id: &str,
    levels: &[LevelPrediction],
    seconds_per_step: f64,
    duration: f64,
    config: &PostprocessConfig,
) -> Result<Vec<Detection>> {
    let mut candidates = Vec::new();
    for level in levels {
        let (nc, t) = (level.probs.rows(), level.probs.cols());
        if level.offsets.shape() != [2, t] {
            return dim_err(format!(
                "offsets {:?} do not match probabilities {:?}",
                level.offsets.shape(),
                level.probs.shape()
            ));
        }
        for c in 0..nc {
            for i in 0..t {
                let score = level.probs.at(c, i);
                if score <= config.score_threshold {
                    continue;
                }
                let offsets = (level.offsets.at(0, i), level.offsets.at(1, i));
                if let Some((start, end)) = decode(i, offsets, level.stride, seconds_per_step, duration) {
                    candidates.push(Detection {
                        video_id: video_id.to_string(),
                        start,
                        end,
                        label: c,
                        score,
                    });
                }
            }
        }
    }
    candidates.sort_by(by_score_desc);
    candidates.truncate(config.pre_nms_top_k);
    let mut out = soft_nms(candidates, config);
    out.sort_by(by_score_desc);
    Ok(out)
}
