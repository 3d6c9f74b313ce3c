//! The full detector: encoder, two dynamic heads and the output layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{
    apply_heads, assign_targets, postprocess, AssignConfig, ClsHead, Detection, LevelOutput, LevelPrediction,
    LossConfig, PostprocessConfig, RegHead, Segment, TargetAssignment,
};
use crate::dyhead::{DyHead, DyHeadConfig};
use crate::encoder::{Encoder, EncoderConfig, LevelVar};
use crate::error::{config_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: DyHeadConfig,
    pub num_classes: usize,
    pub loss: LossConfig,
    pub center_radius: f64,
    /// Per-level regression ranges; `None` for the geometric default.
    pub regression_ranges: Option<Vec<(f64, f64)>>,
    pub postprocess: PostprocessConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head: DyHeadConfig::default(),
            num_classes: 3,
            loss: LossConfig::default(),
            center_radius: 1.5,
            regression_ranges: None,
            postprocess: PostprocessConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.head.width != self.encoder.width {
            return config_err(format!(
                "head width {} differs from encoder width {}",
                self.head.width, self.encoder.width
            ));
        }
        if self.head.depth == 0 {
            return config_err("head depth must be at least 1");
        }
        if self.num_classes == 0 {
            return config_err("num_classes must be positive");
        }
        if self.center_radius <= 0.0 {
            return config_err("center radius must be positive");
        }
        Ok(())
    }

    pub fn assign_config(&self) -> AssignConfig {
        AssignConfig {
            num_classes: self.num_classes,
            center_radius: self.center_radius,
            regression_ranges: self.regression_ranges.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub cls_trunk: DyHead,
    pub reg_trunk: DyHead,
    pub cls_head: ClsHead,
    pub reg_head: RegHead,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub pyramid: Vec<LevelVar>,
    pub outputs: Vec<LevelOutput>,
}

impl Model {
    /// Builds the model and its freshly initialized parameters.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let encoder = Encoder::init(&mut init, &config.encoder)?;
        let cls_trunk = DyHead::init(&mut init, "cls_trunk", &config.head)?;
        let reg_trunk = DyHead::init(&mut init, "reg_trunk", &config.head)?;
        let cls_head = ClsHead::init(&mut init, config.encoder.width, config.num_classes);
        let reg_head = RegHead::init(&mut init, config.encoder.width);
        let model = Self {
            config: config.clone(),
            encoder,
            cls_trunk,
            reg_trunk,
            cls_head,
            reg_head,
        };
        Ok((model, store))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, raw: Var) -> Result<ForwardVars> {
        let pyramid = self.encoder.forward(g, store, raw)?;
        let cls = self.cls_trunk.forward(g, store, &pyramid)?;
        let reg = self.reg_trunk.forward(g, store, &pyramid)?;
        let outputs = apply_heads(g, store, &self.cls_head, &self.reg_head, &cls, &reg)?;
        Ok(ForwardVars { pyramid, outputs })
    }

    /// `(stride, length)` of every level for an input of length `t`.
    pub fn level_layout(&self, t: usize) -> Vec<(usize, usize)> {
        let cfg = &self.config.encoder;
        cfg.level_strides().into_iter().zip(cfg.level_lengths(t)).collect()
    }

    /// Targets for segments given in input-grid units.
    pub fn assign(&self, gt: &[Segment], t: usize) -> Result<TargetAssignment> {
        assign_targets(gt, &self.level_layout(t), &self.config.assign_config())
    }

    /// Forward-only head outputs over the full sequence.
    pub fn predict(&self, store: &ParamStore, features: &Tensor) -> Result<Vec<LevelPrediction>> {
        let mut g = Graph::new();
        let x = g.input(features.clone());
        let fwd = self.forward(&mut g, store, x)?;
        Ok(fwd
            .outputs
            .iter()
            .map(|o| LevelPrediction {
                probs: g.value(o.probs).clone(),
                offsets: g.value(o.offsets).clone(),
                stride: o.stride,
            })
            .collect())
    }

    pub fn detect(
        &self,
        store: &ParamStore,
        video_id: &str,
        features: &Tensor,
        seconds_per_step: f64,
        duration: f64,
    ) -> Result<Vec<Detection>> {
        let levels = self.predict(store, features)?;
        postprocess(video_id, &levels, seconds_per_step, duration, &self.config.postprocess)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                c_feat: 4,
                width: 6,
                num_down: 3,
                ..Default::default()
            },
            head: DyHeadConfig {
                width: 6,
                depth: 2,
                ..Default::default()
            },
            num_classes: 2,
            ..Default::default()
        }
    }

    #[test]
    fn output_shapes() {
        let cfg = tiny_config();
        let (m, store) = Model::new(&cfg, 3).unwrap();
        let x = Tensor::full(&[4, 21], 0.1);
        let p = m.predict(&store, &x).unwrap();
        let lens: Vec<usize> = p.iter().map(|l| l.probs.cols()).collect();
        assert_eq!(lens, vec![11, 6, 3]);
        assert!(p.iter().all(|l| l.probs.rows() == 2 && l.offsets.rows() == 2));
        assert_eq!(m.level_layout(21), vec![(2, 11), (4, 6), (8, 3)]);
        // the initial classifier sits near the prior
        let mean = p[0].probs.sum() / p[0].probs.len() as f64;
        assert!(mean < 0.1);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = tiny_config();
        let (_, a) = Model::new(&cfg, 9).unwrap();
        let (_, b) = Model::new(&cfg, 9).unwrap();
        let (_, c) = Model::new(&cfg, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut cfg = tiny_config();
        cfg.head.width = 8;
        assert!(Model::new(&cfg, 0).is_err());
    }
}
