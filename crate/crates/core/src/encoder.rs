//! Feature embedding, DynE layers and feature-pyramid construction.
//!
//! The encoder is `embed → stem layers → downsampling layers`. Each
//! downsampling layer halves the temporal length (max-pool, odd tail kept),
//! and the layer-normalized outputs of the downsampling layers form the
//! pyramid, so level `ℓ` (1-based) has stride `2^ℓ`.
//!
//! A DynE layer sums three paths on `x = DS(f)`:
//!
//! ```text
//! instance: K_1 ⊙ (φ(Ψ(mean_c(LN(x)))) ⊙ LN(x))   // one gate per timestamp
//! window:   DFA_Conv_{k,w}(LN(x))                   // depthwise, dilated taps
//! residual: x
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dfa::{self, DfaConfig, DfaParams, Formation, Gate, MaskGenerator};
use crate::error::{config_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// One level of a feature pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    /// Temporal stride relative to the input feature grid.
    pub stride: usize,
    pub level: usize,
}

impl FeatureMap {
    pub fn len(&self) -> usize {
        self.data.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn lengths(&self) -> Vec<usize> {
        self.levels.iter().map(FeatureMap::len).collect()
    }

    pub fn strides(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.stride).collect()
    }
}

/// A pyramid level inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct LevelVar {
    pub var: Var,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    /// DynE layers with dynamic feature aggregation.
    DynE,
    /// Same topology with plain depthwise convolutions (no masks).
    PlainConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub c_feat: usize,
    pub width: usize,
    pub k: usize,
    pub window: usize,
    pub formation: Formation,
    pub gate: Gate,
    pub num_stem: usize,
    pub num_down: usize,
    pub include_stem_level: bool,
    pub kind: EncoderKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            c_feat: 32,
            width: 32,
            k: 3,
            window: 5,
            formation: Formation::K,
            gate: Gate::Relu,
            num_stem: 2,
            num_down: 5,
            include_stem_level: false,
            kind: EncoderKind::DynE,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_down == 0 {
            return config_err("num_down must be at least 1");
        }
        if self.window == 0 {
            return config_err("window factor must be at least 1");
        }
        if self.c_feat == 0 || self.width == 0 {
            return config_err("channel counts must be positive");
        }
        tensor::check_odd(self.k)
    }

    /// Minimum input length accepted by [`Encoder::forward`].
    pub fn min_length(&self) -> usize {
        1 << self.num_down
    }

    /// Lengths of the pyramid levels for an input of length `t`.
    pub fn level_lengths(&self, t: usize) -> Vec<usize> {
        self.level_strides()
            .into_iter()
            .map(|s| t.div_ceil(s))
            .collect()
    }

    pub fn level_strides(&self) -> Vec<usize> {
        let first = if self.include_stem_level { 0 } else { 1 };
        (first..=self.num_down).map(|l| 1usize << l).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNormParams {
    pub fn init<R: Rng>(init: &mut Init<'_, R>, name: &str, c: usize) -> Self {
        init.scoped(name, |init| Self {
            gain: init.constant("gain", &[c], 1.0),
            offset: init.constant("offset", &[c], 0.0),
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let offset = g.param(store, self.offset);
        g.layer_norm(x, gain, offset)
    }
}

/// Two `conv(k=3) → LN → ReLU` blocks projecting `C_feat → C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub convs: Vec<(ParamId, ParamId)>,
    pub norms: Vec<LayerNormParams>,
}

impl Embedding {
    pub fn init<R: Rng>(init: &mut Init<'_, R>, c_feat: usize, width: usize) -> Self {
        init.scoped("embed", |init| {
            let mut convs = Vec::new();
            let mut norms = Vec::new();
            for (i, c_in) in [c_feat, width].into_iter().enumerate() {
                let w = init.kernel(&format!("conv{i}"), &[width, c_in, 3], 3 * c_in, 1.0);
                let b = init.constant(&format!("conv{i}_bias"), &[width], 0.0);
                convs.push((w, b));
                norms.push(LayerNormParams::init(init, &format!("ln{i}"), width));
            }
            Self { convs, norms }
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, raw: Var) -> Result<Var> {
        let mut h = raw;
        for ((w, b), ln) in self.convs.iter().zip(&self.norms) {
            let w = g.param(store, *w);
            let b = g.param(store, *b);
            h = g.conv1d(h, w, Some(b), &[-1, 0, 1])?;
            h = ln.apply(g, store, h)?;
            h = g.relu(h);
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerBranches {
    Dynamic {
        /// Ψ over the channel-averaged signal (1 channel in, 1 mask row out).
        instance_gate: MaskGenerator,
        gate: Gate,
        window: DfaParams,
    },
    Plain {
        conv_kernel: ParamId,
        conv_bias: ParamId,
        offsets: Vec<isize>,
    },
}

/// One encoder layer. Both kinds share the instance scaling kernel and the
/// residual; they differ in whether masks gate the paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynELayer {
    pub name: String,
    pub downsample: bool,
    pub ln: LayerNormParams,
    /// Depthwise k=1 kernel `[C × 1]` and bias of the instance branch.
    pub instance_kernel: ParamId,
    pub instance_bias: ParamId,
    pub branches: LayerBranches,
}

impl DynELayer {
    pub fn init<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        cfg: &EncoderConfig,
        downsample: bool,
    ) -> Result<Self> {
        let c = cfg.width;
        init.scoped(name, |init| {
            let ln = LayerNormParams::init(init, "ln", c);
            let instance_kernel = init.kernel("instance.kernel", &[c, 1], 1, 0.5);
            let instance_bias = init.constant("instance.bias", &[c], 0.0);
            let branches = match cfg.kind {
                EncoderKind::DynE => LayerBranches::Dynamic {
                    instance_gate: MaskGenerator::init(init, "instance.psi", 1, 1),
                    gate: cfg.gate,
                    window: DfaParams::init(
                        init,
                        "window",
                        DfaConfig::depthwise(c, cfg.k)
                            .with_formation(cfg.formation)
                            .with_gate(cfg.gate)
                            .with_window(cfg.window),
                    )?,
                },
                EncoderKind::PlainConv => LayerBranches::Plain {
                    conv_kernel: init.kernel("window.kernel", &[c, cfg.k], cfg.k, 1.0),
                    conv_bias: init.constant("window.bias", &[c], 0.0),
                    offsets: dfa::tap_offsets(cfg.k, cfg.window)?,
                },
            };
            Ok(Self {
                name: init.prefix().to_string(),
                downsample,
                ln,
                instance_kernel,
                instance_bias,
                branches,
            })
        })
    }

    /// `f_dyn = f_window + f_instance + DS(f)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        let x = if self.downsample {
            if g.value(f).cols() < 2 {
                return config_err(format!("{}: cannot downsample length 1", self.name));
            }
            g.max_pool_ds2(f)?
        } else {
            f
        };
        let normed = self.ln.apply(g, store, x)?;
        let c = g.value(x).rows();

        let (instance_in, window_out) = match &self.branches {
            LayerBranches::Dynamic { instance_gate, gate, window } => {
                let squeezed = g.channel_mean(normed)?;
                let scores = instance_gate.scores(g, store, squeezed)?;
                let m = gate.apply(g, scores);
                g.tag(|| format!("{}.instance.mask", self.name), m);
                let wide = g.gather_rows(m, vec![0; c])?;
                // the gate comes from the normalized signal but scales DS(f)
                let gated = g.mul(wide, x)?;
                (gated, dfa::dfa_conv(g, store, normed, window)?)
            }
            LayerBranches::Plain { conv_kernel, conv_bias, offsets } => {
                let w = g.param(store, *conv_kernel);
                let b = g.param(store, *conv_bias);
                (x, g.depthwise_conv(normed, w, Some(b), offsets)?)
            }
        };
        let ik = g.param(store, self.instance_kernel);
        let ib = g.param(store, self.instance_bias);
        let instance_out = g.depthwise_aggregate(instance_in, ik, Some(ib))?;

        let sum = g.add(window_out, instance_out)?;
        g.add(sum, x)
    }

    /// Ids of the kernels and biases of both branches (used to zero them).
    pub fn branch_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.instance_kernel, self.instance_bias];
        match &self.branches {
            LayerBranches::Dynamic { window, .. } => {
                ids.push(window.kernel);
                ids.extend(window.bias);
            }
            LayerBranches::Plain { conv_kernel, conv_bias, .. } => {
                ids.extend([*conv_kernel, *conv_bias]);
            }
        }
        ids
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embed: Embedding,
    pub stem: Vec<DynELayer>,
    pub down: Vec<DynELayer>,
    /// Output norms, one per pyramid level.
    pub level_norms: Vec<LayerNormParams>,
}

impl Encoder {
    pub fn init<R: Rng>(init: &mut Init<'_, R>, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        init.scoped("encoder", |init| {
            let embed = Embedding::init(init, config.c_feat, config.width);
            let stem = (0..config.num_stem)
                .map(|i| DynELayer::init(init, &format!("stem{i}"), config, false))
                .collect::<Result<Vec<_>>>()?;
            let down = (0..config.num_down)
                .map(|i| DynELayer::init(init, &format!("down{i}"), config, true))
                .collect::<Result<Vec<_>>>()?;
            let n_levels = config.num_down + usize::from(config.include_stem_level);
            let level_norms = (0..n_levels)
                .map(|i| LayerNormParams::init(init, &format!("level_norm{i}"), config.width))
                .collect();
            Ok(Self {
                config: config.clone(),
                embed,
                stem,
                down,
                level_norms,
            })
        })
    }

    /// Runs the encoder on a `[C_feat × T]` input node.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, raw: Var) -> Result<Vec<LevelVar>> {
        let (c_feat, t) = (g.value(raw).rows(), g.value(raw).cols());
        if c_feat != self.config.c_feat {
            return dim_err(format!(
                "encoder expects {} feature channels, got {c_feat}",
                self.config.c_feat
            ));
        }
        if t < self.config.min_length() {
            return config_err(format!(
                "input length {t} is shorter than 2^num_down = {}",
                self.config.min_length()
            ));
        }
        let mut h = self.embed.forward(g, store, raw)?;
        for layer in &self.stem {
            h = layer.forward(g, store, h)?;
        }
        let mut outputs = Vec::new();
        if self.config.include_stem_level {
            outputs.push((h, 1));
        }
        let mut stride = 1;
        for layer in &self.down {
            h = layer.forward(g, store, h)?;
            stride *= 2;
            outputs.push((h, stride));
        }
        outputs
            .into_iter()
            .zip(&self.level_norms)
            .map(|((v, stride), ln)| {
                Ok(LevelVar {
                    var: ln.apply(g, store, v)?,
                    stride,
                })
            })
            .collect()
    }

    /// Forward-only pyramid construction.
    pub fn build_pyramid(&self, store: &ParamStore, raw: &Tensor) -> Result<FeaturePyramid> {
        let mut g = Graph::new();
        let x = g.input(raw.clone());
        let levels = self.forward(&mut g, store, x)?;
        Ok(FeaturePyramid {
            levels: levels
                .iter()
                .enumerate()
                .map(|(level, l)| FeatureMap {
                    data: g.value(l.var).clone(),
                    stride: l.stride,
                    level,
                })
                .collect(),
        })
    }
}
