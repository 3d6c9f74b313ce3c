//! Multi-scale dynamic detection head.
//!
//! Each of `D` rounds refines every pyramid level from the previous round's
//! features of that level and its two neighbours:
//!
//! ```text
//! f̃ = γ_d·( DS(Att_down(LN(f_lower))) + US(Att_up(LN(f_upper))) ) + α_d·f
//! f' = Att_depth(f̃)
//! ```
//!
//! A missing neighbour (first or last level) contributes nothing. Parameters
//! are shared across levels, so the parameter count does not depend on the
//! number of levels. Rounds are synchronous: round `d` reads only round
//! `d−1` features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dfa::{self, DfaConfig, DfaParams, Gate};
use crate::encoder::{FeatureMap, FeaturePyramid, LayerNormParams, LevelVar};
use crate::error::{config_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DyHeadConfig {
    pub width: usize,
    pub k: usize,
    pub depth: usize,
    pub gate: Gate,
}

impl Default for DyHeadConfig {
    fn default() -> Self {
        Self {
            width: 32,
            k: 3,
            depth: 3,
            gate: Gate::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyHeadRound {
    pub down: DfaParams,
    pub up: DfaParams,
    pub depth: DfaParams,
    pub ln_down: LayerNormParams,
    pub ln_up: LayerNormParams,
    pub gamma: ParamId,
    pub alpha: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyHead {
    pub name: String,
    pub config: DyHeadConfig,
    pub rounds: Vec<DyHeadRound>,
}

impl DyHead {
    pub fn init<R: Rng>(init: &mut Init<'_, R>, name: &str, config: &DyHeadConfig) -> Result<Self> {
        if config.depth == 0 {
            return config_err("head depth must be at least 1");
        }
        let att = DfaConfig::depthwise(config.width, config.k).with_gate(config.gate);
        init.scoped(name, |init| {
            let rounds = (0..config.depth)
                .map(|d| {
                    init.scoped(&format!("round{d}"), |init| {
                        Ok(DyHeadRound {
                            down: DfaParams::init(init, "down", att.clone())?,
                            up: DfaParams::init(init, "up", att.clone())?,
                            depth: DfaParams::init(init, "depth", att.clone())?,
                            ln_down: LayerNormParams::init(init, "ln_down", config.width),
                            ln_up: LayerNormParams::init(init, "ln_up", config.width),
                            gamma: init.constant("gamma", &[1], 1.0),
                            alpha: init.constant("alpha", &[1], 1.0),
                        })
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Self {
                name: init.prefix().to_string(),
                config: config.clone(),
                rounds,
            })
        })
    }

    fn round(&self, d: usize) -> Result<&DyHeadRound> {
        self.rounds
            .get(d)
            .ok_or_else(|| crate::Error::Config(format!("{}: no round {d}", self.name)))
    }

    /// Cross-level fusion of one level in round `d`.
    pub fn fuse_level(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        lower: Option<LevelVar>,
        f: LevelVar,
        upper: Option<LevelVar>,
        d: usize,
    ) -> Result<Var> {
        let r = self.round(d)?;
        let t = g.value(f.var).cols();
        let mut neighbours = None;
        if let Some(lo) = lower {
            if lo.stride * 2 != f.stride {
                return dim_err(format!(
                    "lower neighbour stride {} is not half of {}",
                    lo.stride, f.stride
                ));
            }
            let x = r.ln_down.apply(g, store, lo.var)?;
            let x = dfa::dfa_att(g, store, x, &r.down)?;
            let x = g.max_pool_ds2(x)?;
            if g.value(x).cols() != t {
                return dim_err(format!(
                    "lower neighbour pools to {} steps, level has {t}",
                    g.value(x).cols()
                ));
            }
            neighbours = Some(x);
        }
        if let Some(up) = upper {
            if up.stride != f.stride * 2 {
                return dim_err(format!(
                    "upper neighbour stride {} is not double of {}",
                    up.stride, f.stride
                ));
            }
            let x = r.ln_up.apply(g, store, up.var)?;
            let x = dfa::dfa_att(g, store, x, &r.up)?;
            let x = g.upsample_x2(x, t)?;
            neighbours = Some(match neighbours {
                Some(n) => g.add(n, x)?,
                None => x,
            });
        }
        let alpha = g.param(store, r.alpha);
        let own = g.scale_by(f.var, alpha)?;
        match neighbours {
            Some(n) => {
                let gamma = g.param(store, r.gamma);
                let n = g.scale_by(n, gamma)?;
                g.add(n, own)
            }
            None => Ok(own),
        }
    }

    /// Depth path of round `d`.
    pub fn depth_step(&self, g: &mut Graph, store: &ParamStore, fused: Var, d: usize) -> Result<Var> {
        dfa::dfa_att(g, store, fused, &self.round(d)?.depth)
    }

    /// All `D` rounds over every level.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, levels: &[LevelVar]) -> Result<Vec<LevelVar>> {
        let mut cur = levels.to_vec();
        for d in 0..self.rounds.len() {
            let mut next = Vec::with_capacity(cur.len());
            for (l, &f) in cur.iter().enumerate() {
                let lower = l.checked_sub(1).map(|i| cur[i]);
                let upper = cur.get(l + 1).copied();
                g.set_tag_context(format!("level{l}"));
                let fused = self.fuse_level(g, store, lower, f, upper, d)?;
                let out = self.depth_step(g, store, fused, d)?;
                g.set_tag_context("");
                next.push(LevelVar { var: out, stride: f.stride });
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Forward-only evaluation over a pyramid.
    pub fn apply(&self, store: &ParamStore, pyramid: &FeaturePyramid) -> Result<FeaturePyramid> {
        let mut g = Graph::new();
        let levels: Vec<LevelVar> = pyramid
            .levels
            .iter()
            .map(|l| LevelVar { var: g.input(l.data.clone()), stride: l.stride })
            .collect();
        let out = self.forward(&mut g, store, &levels)?;
        Ok(FeaturePyramid {
            levels: out
                .iter()
                .zip(&pyramid.levels)
                .map(|(o, l)| FeatureMap {
                    data: g.value(o.var).clone(),
                    stride: l.stride,
                    level: l.level,
                })
                .collect(),
        })
    }

    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store.ids_with_prefix(&format!("{}.", self.name)).collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn build(depth: usize) -> (ParamStore, DyHead) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = DyHeadConfig { width: 3, depth, ..DyHeadConfig::default() };
        let h = DyHead::init(&mut Init::new(&mut store, &mut rng), "head", &cfg).unwrap();
        (store, h)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn pyramid(lengths: &[usize]) -> FeaturePyramid {
        FeaturePyramid {
            levels: lengths
                .iter()
                .enumerate()
                .map(|(i, &t)| FeatureMap { data: random(3, t, i as u64), stride: 2 << i, level: i })
                .collect(),
        }
    }

    /// Makes every round an identity: γ = 0, α = 1, depth path routing only
    /// the center tap through a unit kernel.
    fn make_identity(store: &mut ParamStore, h: &DyHead) {
        for r in &h.rounds {
            store.set(r.gamma, Tensor::scalar(0.0));
            store.set(r.alpha, Tensor::scalar(1.0));
            r.depth.set_constant_psi(store, 0.0);
            store.set(r.depth.psi.output_bias(), Tensor::new(vec![3], vec![-1.0, 1.0, -1.0]).unwrap());
            store.set(r.depth.kernel, Tensor::full(&[3, 3], 1.0));
            store.set(r.depth.bias.unwrap(), Tensor::zeros(&[3]));
        }
    }

    #[test]
    fn gamma_zero_scales_own_level() {
        let (mut store, h) = build(1);
        store.set(h.rounds[0].gamma, Tensor::scalar(0.0));
        store.set(h.rounds[0].alpha, Tensor::scalar(2.5));
        let p = pyramid(&[8, 4, 2]);
        let mut g = Graph::new();
        let vars: Vec<LevelVar> = p.levels.iter().map(|l| LevelVar { var: g.input(l.data.clone()), stride: l.stride }).collect();
        let y = h.fuse_level(&mut g, &store, Some(vars[0]), vars[1], Some(vars[2]), 0).unwrap();
        assert_eq!(g.value(y), &p.levels[1].data.scale(2.5));

        let y = h.fuse_level(&mut g, &store, None, vars[1], None, 0).unwrap();
        assert_eq!(g.value(y), &p.levels[1].data.scale(2.5));
    }

    #[test]
    fn fuse_preserves_length_with_odd_neighbours() {
        let (store, h) = build(1);
        // 9 → 5 → 3
        let p = FeaturePyramid {
            levels: vec![
                FeatureMap { data: random(3, 9, 1), stride: 2, level: 0 },
                FeatureMap { data: random(3, 5, 2), stride: 4, level: 1 },
                FeatureMap { data: random(3, 3, 3), stride: 8, level: 2 },
            ],
        };
        let out = h.apply(&store, &p).unwrap();
        assert_eq!(out.lengths(), vec![9, 5, 3]);
    }

    #[test]
    fn stride_mismatch_rejected() {
        let (store, h) = build(1);
        let mut g = Graph::new();
        let a = LevelVar { var: g.input(random(3, 8, 1)), stride: 2 };
        let b = LevelVar { var: g.input(random(3, 4, 2)), stride: 8 };
        assert!(matches!(
            h.fuse_level(&mut g, &store, Some(a), b, None, 0),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn identity_rounds_reproduce_input() {
        for depth in [1, 2] {
            let (mut store, h) = build(depth);
            make_identity(&mut store, &h);
            let p = pyramid(&[8, 4, 2]);
            let out = h.apply(&store, &p).unwrap();
            for (a, b) in out.levels.iter().zip(&p.levels) {
                assert!(a.data.max_abs_diff(&b.data) < 1e-6);
            }
        }
    }

    #[test]
    fn depth_step_zero_gates() {
        let (mut store, h) = build(1);
        h.rounds[0].depth.set_constant_psi(&mut store, -1.0);
        store.set(h.rounds[0].depth.bias.unwrap(), Tensor::zeros(&[3]));
        let mut g = Graph::new();
        let x = g.input(random(3, 6, 9));
        let y = h.depth_step(&mut g, &store, x, 0).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_count_independent_of_levels() {
        let (store, h) = build(3);
        let n = store.numel();
        // forward over 2 or 5 levels touches the same parameter set
        for lengths in [vec![8, 4], vec![32, 16, 8, 4, 2]] {
            let p = pyramid(&lengths);
            let mut g = Graph::new();
            let levels: Vec<LevelVar> = p.levels.iter().map(|l| LevelVar { var: g.input(l.data.clone()), stride: l.stride }).collect();
            let out = h.forward(&mut g, &store, &levels).unwrap();
            let mut total = g.sum(out[0].var);
            for o in &out[1..] {
                let s = g.sum(o.var);
                total = g.add(total, s).unwrap();
            }
            g.backward(total).unwrap();
            assert_eq!(g.param_grads().count(), h.param_ids(&store).len());
        }
        assert_eq!(store.numel(), n);
    }
}
