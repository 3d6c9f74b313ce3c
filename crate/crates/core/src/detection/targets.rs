use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::graph::RegTarget;
use crate::tensor::Tensor;

use super::Segment;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignConfig {
    pub num_classes: usize,
    /// Center-sampling radius in units of the level stride.
    pub center_radius: f64,
    /// Per-level `[lo, hi)` bounds on `max(d_start, d_end)` in input-grid
    /// units. `None` selects [`default_regression_ranges`].
    pub regression_ranges: Option<Vec<(f64, f64)>>,
}

impl AssignConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            center_radius: 1.5,
            regression_ranges: None,
        }
    }

    pub fn ranges(&self, num_levels: usize) -> Result<Vec<(f64, f64)>> {
        match &self.regression_ranges {
            Some(r) if r.len() == num_levels => Ok(r.clone()),
            Some(r) => config_err(format!(
                "{} regression ranges configured for {num_levels} levels",
                r.len()
            )),
            None => Ok(default_regression_ranges(num_levels)),
        }
    }
}

/// Geometric buckets: level `ℓ` takes max-offsets in `[2^(ℓ+1), 2^(ℓ+2))`,
/// except that the first level starts at 0 and the last is unbounded.
pub fn default_regression_ranges(num_levels: usize) -> Vec<(f64, f64)> {
    (0..num_levels)
        .map(|l| {
            let lo = if l == 0 { 0.0 } else { (1u64 << (l + 1)) as f64 };
            let hi = if l + 1 == num_levels {
                f64::INFINITY
            } else {
                (1u64 << (l + 2)) as f64
            };
            (lo, hi)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub stride: usize,
    /// Multi-hot class targets, `[num_classes × T]`.
    pub cls: Tensor,
    /// Regression targets of the positive timestamps, in stride units.
    pub reg: Vec<RegTarget>,
}

impl LevelTargets {
    pub fn is_positive(&self, t: usize) -> bool {
        self.reg.iter().any(|r| r.t == t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetAssignment {
    pub levels: Vec<LevelTargets>,
}

impl TargetAssignment {
    pub fn num_positive(&self) -> usize {
        self.levels.iter().map(|l| l.reg.len()).sum()
    }
}

/// Labels grid points near instance centers as positives.
///
/// Grid point `t` of a level with stride `s` sits at `p = t·s`. It is
/// positive for instance `m` when `p` lies strictly inside both the instance
/// and the window `center ± radius·s`, and `max(p − start, end − p)` falls in
/// the level's regression range. Class targets are the union of labels of all
/// matching instances; regression follows the shortest one.
///
/// `levels` lists `(stride, length)` per level; segments are in grid units.
pub fn assign_targets(
    gt: &[Segment],
    levels: &[(usize, usize)],
    config: &AssignConfig,
) -> Result<TargetAssignment> {
    let ranges = config.ranges(levels.len())?;
    if let Some(bad) = gt.iter().find(|s| s.label >= config.num_classes) {
        return config_err(format!(
            "label {} out of range for {} classes",
            bad.label, config.num_classes
        ));
    }
    let out = levels
        .iter()
        .zip(&ranges)
        .map(|(&(stride, len), &(lo, hi))| {
            let s = stride as f64;
            let mut cls = Tensor::zeros(&[config.num_classes, len]);
            let mut reg = Vec::new();
            for t in 0..len {
                let p = t as f64 * s;
                let mut best: Option<(f64, f64, f64)> = None;
                for seg in gt {
                    let (ds, de) = (p - seg.start, seg.end - p);
                    let c = seg.center();
                    let left = p - (c - config.center_radius * s).max(seg.start);
                    let right = (c + config.center_radius * s).min(seg.end) - p;
                    if left <= 0.0 || right <= 0.0 {
                        continue;
                    }
                    let reach = ds.max(de);
                    if reach < lo || reach >= hi {
                        continue;
                    }
                    cls.data_mut()[seg.label * len + t] = 1.0;
                    if best.map_or(true, |(d, _, _)| seg.duration() < d) {
                        best = Some((seg.duration(), ds, de));
                    }
                }
                if let Some((_, ds, de)) = best {
                    reg.push(RegTarget { t, start: ds / s, end: de / s });
                }
            }
            LevelTargets { stride, cls, reg }
        })
        .collect();
    Ok(TargetAssignment { levels: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_ranges() {
        let r = default_regression_ranges(5);
        assert_eq!(r[0], (0.0, 4.0));
        assert_eq!(r[1], (4.0, 8.0));
        assert_eq!(r[3], (16.0, 32.0));
        assert_eq!(r[4].0, 32.0);
        assert!(r[4].1.is_infinite());
        assert_eq!(default_regression_ranges(1), vec![(0.0, f64::INFINITY)]);
    }

    #[test]
    fn centered_instance_is_positive() {
        let cfg = AssignConfig::new(2);
        let gt = [Segment::new(8.0, 12.0, 1)];
        let a = assign_targets(&gt, &[(1, 20)], &cfg).unwrap();
        let l = &a.levels[0];
        assert!(l.is_positive(10));
        assert_eq!(l.cls.at(1, 10), 1.0);
        assert_eq!(l.cls.at(0, 10), 0.0);
        let r = l.reg.iter().find(|r| r.t == 10).unwrap();
        assert_eq!((r.start, r.end), (2.0, 2.0));
        // radius 1.5: 9, 10, 11 positive; 8 and 12 are on the boundary
        assert_eq!(l.reg.iter().map(|r| r.t).collect::<Vec<_>>(), vec![9, 10, 11]);
    }

    #[test]
    fn short_instance_has_no_coarse_positives() {
        let cfg = AssignConfig::new(1);
        let gt = [Segment::new(30.0, 33.0, 0)];
        let a = assign_targets(&gt, &[(2, 32), (4, 16), (8, 8)], &cfg).unwrap();
        assert!(a.levels[0].reg.len() > 0);
        assert!(a.levels[1].reg.is_empty());
        assert!(a.levels[2].reg.is_empty());
    }

    #[test]
    fn nested_instances_regress_to_shorter() {
        let cfg = AssignConfig {
            center_radius: 100.0,
            regression_ranges: Some(vec![(0.0, f64::INFINITY)]),
            ..AssignConfig::new(2)
        };
        let gt = [Segment::new(0.0, 20.0, 0), Segment::new(8.0, 12.0, 1)];
        let a = assign_targets(&gt, &[(1, 20)], &cfg).unwrap();
        let l = &a.levels[0];
        let r = l.reg.iter().find(|r| r.t == 10).unwrap();
        assert_eq!((r.start, r.end), (2.0, 2.0));
        assert_eq!(l.cls.at(0, 10), 1.0);
        assert_eq!(l.cls.at(1, 10), 1.0);
        let r = l.reg.iter().find(|r| r.t == 4).unwrap();
        assert_eq!((r.start, r.end), (4.0, 16.0));
    }

    #[test]
    fn empty_ground_truth() {
        let a = assign_targets(&[], &[(2, 8), (4, 4)], &AssignConfig::new(3)).unwrap();
        assert_eq!(a.num_positive(), 0);
        assert!(a.levels.iter().all(|l| l.cls.sum() == 0.0));
    }

    #[test]
    fn bad_label_rejected() {
        let gt = [Segment::new(1.0, 3.0, 5)];
        assert!(assign_targets(&gt, &[(1, 8)], &AssignConfig::new(3)).is_err());
    }
}
