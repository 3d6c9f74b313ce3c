use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};

use super::{LevelOutput, TargetAssignment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub reg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            reg_weight: 1.0,
        }
    }
}

/// Unnormalized loss sums of one video.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cls: Var,
    /// `None` when the video has no positive timestamps.
    pub reg: Option<Var>,
    pub num_positive: usize,
}

/// Scalar summary of a loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOutput {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub num_positive: usize,
}

/// Sums focal loss over every level, class and timestamp, and DIoU loss over
/// the positive timestamps.
pub fn loss_terms(
    g: &mut Graph,
    outputs: &[LevelOutput],
    targets: &TargetAssignment,
    config: &LossConfig,
) -> Result<LossTerms> {
    if outputs.len() != targets.levels.len() {
        return dim_err(format!(
            "{} output levels but {} target levels",
            outputs.len(),
            targets.levels.len()
        ));
    }
    let mut cls: Option<Var> = None;
    let mut reg: Option<Var> = None;
    for (out, tgt) in outputs.iter().zip(&targets.levels) {
        if out.stride != tgt.stride {
            return dim_err(format!("stride {} vs target stride {}", out.stride, tgt.stride));
        }
        let c = g.focal_loss(out.probs, tgt.cls.clone(), config.focal_alpha, config.focal_gamma)?;
        cls = Some(match cls {
            Some(acc) => g.add(acc, c)?,
            None => c,
        });
        if !tgt.reg.is_empty() {
            let r = g.diou_loss(out.offsets, tgt.reg.clone())?;
            reg = Some(match reg {
                Some(acc) => g.add(acc, r)?,
                None => r,
            });
        }
    }
    let Some(cls) = cls else {
        return dim_err("loss over an empty pyramid");
    };
    Ok(LossTerms { cls, reg, num_positive: targets.num_positive() })
}

/// `(Σ cls + λ·Σ reg) / max(T_pos, 1)` where sums and `T_pos` run over all
/// given videos.
pub fn total_loss(g: &mut Graph, terms: &[LossTerms], config: &LossConfig) -> Result<(Var, LossOutput)> {
    let num_positive = terms.iter().map(|t| t.num_positive).sum();
    normalized_loss(g, terms, num_positive, config)
}

/// Like [`total_loss`] but divides by `max(num_positive, 1)` for an externally
/// counted `num_positive`, so videos of one batch can live in separate graphs.
pub fn normalized_loss(
    g: &mut Graph,
    terms: &[LossTerms],
    num_positive: usize,
    config: &LossConfig,
) -> Result<(Var, LossOutput)> {
    let Some(first) = terms.first() else {
        return dim_err("total_loss needs at least one video");
    };
    let mut cls = first.cls;
    for t in &terms[1..] {
        cls = g.add(cls, t.cls)?;
    }
    let mut reg: Option<Var> = None;
    for r in terms.iter().filter_map(|t| t.reg) {
        reg = Some(match reg {
            Some(acc) => g.add(acc, r)?,
            None => r,
        });
    }
    let norm = 1.0 / num_positive.max(1) as f64;

    let cls_value = g.value(cls).item();
    let reg_value = reg.map_or(0.0, |r| g.value(r).item());
    let sum = match reg {
        Some(r) => {
            let weighted = g.scale(r, config.reg_weight);
            g.add(cls, weighted)?
        }
        None => cls,
    };
    let total = g.scale(sum, norm);
    let out = LossOutput {
        total: g.value(total).item(),
        cls: cls_value * norm,
        reg: reg_value * norm,
        num_positive,
    };
    Ok((total, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::LevelTargets;
    use crate::graph::{focal_terms, diou_terms, RegTarget};
    use crate::tensor::Tensor;

    fn two_step_case(g: &mut Graph) -> (Vec<LevelOutput>, TargetAssignment) {
        let probs = g.input(Tensor::from_rows(&[[0.7, 0.2], [0.1, 0.4]]));
        let offsets = g.input(Tensor::from_rows(&[[1.0, 0.5], [2.0, 3.0]]));
        let cls = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        let reg = vec![RegTarget { t: 0, start: 1.5, end: 2.0 }];
        (
            vec![LevelOutput { probs, offsets, stride: 2 }],
            TargetAssignment { levels: vec![LevelTargets { stride: 2, cls, reg }] },
        )
    }

    #[test]
    fn hand_built_two_step_case() {
        let mut g = Graph::new();
        let (outs, tgt) = two_step_case(&mut g);
        let cfg = LossConfig::default();
        let terms = loss_terms(&mut g, &outs, &tgt, &cfg).unwrap();
        let (_, out) = total_loss(&mut g, &[terms], &cfg).unwrap();

        // scalar reference: FL by hand, DIoU by interval arithmetic
        let fl = |p: f64, y: f64| {
            if y == 1.0 {
                -0.25 * (1.0 - p).powi(2) * p.ln()
            } else {
                -0.75 * p.powi(2) * (1.0 - p).ln()
            }
        };
        let cls = fl(0.7, 1.0) + fl(0.2, 0.0) + fl(0.1, 0.0) + fl(0.4, 0.0);
        // pred [-1, 2], target [-1.5, 2]: IoU 3/3.5, centers 0.5 and 0.25
        let reg = 1.0 - 3.0 / 3.5 + (0.25f64 / 3.5).powi(2);
        assert!((out.cls - cls).abs() < 1e-12);
        assert!((out.reg - reg).abs() < 1e-12);
        assert!((out.total - (cls + reg)).abs() < 1e-12);
        assert_eq!(out.num_positive, 1);
    }

    #[test]
    fn no_positives_divides_by_one() {
        let mut g = Graph::new();
        let probs = g.input(Tensor::full(&[2, 3], 1e-12));
        let offsets = g.input(Tensor::zeros(&[2, 3]));
        let tgt = TargetAssignment {
            levels: vec![LevelTargets { stride: 1, cls: Tensor::zeros(&[2, 3]), reg: vec![] }],
        };
        let cfg = LossConfig::default();
        let terms = loss_terms(&mut g, &[LevelOutput { probs, offsets, stride: 1 }], &tgt, &cfg).unwrap();
        assert!(terms.reg.is_none());
        let (_, out) = total_loss(&mut g, &[terms], &cfg).unwrap();
        assert!(out.total < 1e-20);
        assert_eq!(out.reg, 0.0);
    }

    #[test]
    fn perfect_single_positive() {
        let mut g = Graph::new();
        let probs = g.input(Tensor::from_rows(&[[1.0, 0.0]]));
        let offsets = g.input(Tensor::from_rows(&[[2.0, 0.0], [3.0, 0.0]]));
        let tgt = TargetAssignment {
            levels: vec![LevelTargets {
                stride: 1,
                cls: Tensor::from_rows(&[[1.0, 0.0]]),
                reg: vec![RegTarget { t: 0, start: 2.0, end: 3.0 }],
            }],
        };
        let cfg = LossConfig::default();
        let terms = loss_terms(&mut g, &[LevelOutput { probs, offsets, stride: 1 }], &tgt, &cfg).unwrap();
        let (_, out) = total_loss(&mut g, &[terms], &cfg).unwrap();
        assert!(out.total.abs() < 1e-12);
    }

    #[test]
    fn batch_normalizes_by_total_positives() {
        let mut g = Graph::new();
        let cfg = LossConfig::default();
        let (outs, tgt) = two_step_case(&mut g);
        let a = loss_terms(&mut g, &outs, &tgt, &cfg).unwrap();
        let (outs, tgt) = two_step_case(&mut g);
        let b = loss_terms(&mut g, &outs, &tgt, &cfg).unwrap();
        let (_, single) = total_loss(&mut g, &[a], &cfg).unwrap();
        let (_, pair) = total_loss(&mut g, &[a, b], &cfg).unwrap();
        assert_eq!(pair.num_positive, 2);
        assert!((pair.total - single.total).abs() < 1e-12);
    }

    #[test]
    fn scalar_fixtures() {
        let (l, _) = focal_terms(0.5, 1.0, 0.25, 2.0);
        assert!((l - 0.0625 * 2f64.ln()).abs() < 1e-15);
        assert!((l - 0.04332).abs() < 1e-5);
        let (l, _) = focal_terms(0.5, 0.0, 0.25, 2.0);
        assert!((l - 0.12996).abs() < 1e-5);
        // pred [0,2] and target [2,4] seen from anchor 2
        let (l, _, _) = diou_terms((2.0, 0.0), (0.0, 2.0));
        assert!((l - 1.25).abs() < 1e-9);
        let (l, _, _) = diou_terms((1.3, 0.7), (1.3, 0.7));
        assert_eq!(l, 0.0);
    }

    #[test]
    fn mismatched_levels_rejected() {
        let mut g = Graph::new();
        let (outs, mut tgt) = two_step_case(&mut g);
        tgt.levels[0].stride = 4;
        assert!(loss_terms(&mut g, &outs, &tgt, &LossConfig::default()).is_err());
        tgt.levels.clear();
        assert!(loss_terms(&mut g, &outs, &tgt, &LossConfig::default()).is_err());
    }
}
