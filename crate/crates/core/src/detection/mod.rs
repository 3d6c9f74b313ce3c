//! Classification and regression outputs, target assignment, losses and
//! post-processing.

mod loss;
mod postprocess;
mod targets;

pub use loss::{loss_terms, normalized_loss, total_loss, LossConfig, LossOutput, LossTerms};
pub use postprocess::{postprocess, soft_nms, LevelPrediction, PostprocessConfig};
pub use targets::{assign_targets, default_regression_ranges, AssignConfig, LevelTargets, TargetAssignment};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::LevelVar;
use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};

/// A ground-truth action instance. Times are in input-grid units inside the
/// detector and in seconds in annotation files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub label: usize,
}

impl Segment {
    pub fn new(start: f64, end: f64, label: usize) -> Self {
        Self { start, end, label }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

/// A scored prediction. Serializes to the detection JSON schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    #[serde(rename = "t_start")]
    pub start: f64,
    #[serde(rename = "t_end")]
    pub end: f64,
    pub label: usize,
    pub score: f64,
}

/// Prior probability used to initialize the classifier bias.
const CLS_PRIOR: f64 = 0.01;

/// Per-timestamp class probabilities: `sigmoid(conv_3(f))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub num_classes: usize,
}

impl ClsHead {
    pub fn init<R: Rng>(init: &mut Init<'_, R>, width: usize, num_classes: usize) -> Self {
        init.scoped("cls", |init| Self {
            weight: init.kernel("weight", &[num_classes, width, 3], 3 * width, 0.5),
            bias: init.constant("bias", &[num_classes], -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln()),
            num_classes,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let logits = g.conv1d(f, w, Some(b), &[-1, 0, 1])?;
        Ok(g.sigmoid(logits))
    }
}

/// Per-timestamp distances to start and end in units of the level stride:
/// `relu(conv_3(f))`, shape `[2 × T]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl RegHead {
    pub fn init<R: Rng>(init: &mut Init<'_, R>, width: usize) -> Self {
        init.scoped("reg", |init| Self {
            weight: init.kernel("weight", &[2, width, 3], 3 * width, 0.5),
            bias: init.constant("bias", &[2], 1.0),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let raw = g.conv1d(f, w, Some(b), &[-1, 0, 1])?;
        Ok(g.relu(raw))
    }
}

/// Per-level head outputs inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    pub probs: Var,
    pub offsets: Var,
    pub stride: usize,
}

pub fn apply_heads(
    g: &mut Graph,
    store: &ParamStore,
    cls: &ClsHead,
    reg: &RegHead,
    cls_levels: &[LevelVar],
    reg_levels: &[LevelVar],
) -> Result<Vec<LevelOutput>> {
    if cls_levels.len() != reg_levels.len() {
        return dim_err("classification and regression pyramids differ in depth");
    }
    cls_levels
        .iter()
        .zip(reg_levels)
        .map(|(c, r)| {
            Ok(LevelOutput {
                probs: cls.forward(g, store, c.var)?,
                offsets: reg.forward(g, store, r.var)?,
                stride: c.stride,
            })
        })
        .collect()
}

/// Converts offsets predicted at grid index `t` of a level into a segment in
/// seconds, clamped to `[0, duration]`. Returns `None` when the clamped
/// segment is empty.
pub fn decode(
    t: usize,
    offsets: (f64, f64),
    stride: usize,
    seconds_per_step: f64,
    duration: f64,
) -> Option<(f64, f64)> {
    let s = stride as f64;
    let start = ((t as f64 - offsets.0) * s * seconds_per_step).clamp(0.0, duration);
    let end = ((t as f64 + offsets.1) * s * seconds_per_step).clamp(0.0, duration);
    (start < end).then_some((start, end))
}
