//! Dynamic feature aggregation.
//!
//! A temporal convolution with kernel size `k` can be written as a stack of
//! `k` shifted copies of the input followed by a pointwise (1×1) convolution.
//! Dynamic feature aggregation inserts an input-dependent, non-negative mask
//! between the two steps:
//!
//! ```text
//! stack = shift(f, k)                 // [k·C_in × T]
//! mask  = φ(Ψ(f))                     // [C_m × T], C_m ∈ {k, C_in, k·C_in}
//! y     = Σ_s K_s (↑(mask)_s ⊙ stack_s)
//! ```
//!
//! With an all-ones mask this is exactly the plain convolution; a binary mask
//! that keeps one tap per timestamp turns it into a 1-d deformable
//! convolution; and dropping the gate `φ` gives a dynamic convolution that
//! only re-weights the kernel.
//!
//! Two operators are provided. [`dfa_conv`] applies the gated mask directly.
//! [`dfa_att`] normalizes `k` gated scores per timestamp into attention
//! weights over the taps (zeros stay exactly zero) before aggregation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{self, check_odd, Tensor};

/// Guard added to the per-timestamp gate sum in [`dfa_att`].
pub const ATT_EPS: f64 = 1e-8;

/// Kernel size of the depthwise convolution inside the mask generator.
pub const PSI_KERNEL: usize = 3;

/// Which axes the mask adapts along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Formation {
    /// One mask row per tap, shared by all channels (`C_m = k`).
    K,
    /// One mask row per channel, shared by all taps (`C_m = C_in`).
    C,
    /// One mask row per (tap, channel) pair (`C_m = k·C_in`).
    CK,
}

impl Formation {
    pub fn mask_channels(self, c_in: usize, k: usize) -> usize {
        match self {
            Formation::K => k,
            Formation::C => c_in,
            Formation::CK => k * c_in,
        }
    }

    /// Source mask row for every row of the `[k·C_in × T]` shifted stack.
    pub fn upsample_index(self, c_in: usize, k: usize) -> Vec<usize> {
        (0..k * c_in)
            .map(|r| match self {
                Formation::K => r / c_in,
                Formation::C => r % c_in,
                Formation::CK => r,
            })
            .collect()
    }
}

/// Non-linearity applied to the mask generator output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gate {
    Relu,
    RestrictedTanh,
    /// No gate: the mask may be negative, reducing the operator to a
    /// dynamic convolution.
    Identity,
}

impl Gate {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Gate::Relu => g.relu(x),
            Gate::RestrictedTanh => g.restricted_tanh(x),
            Gate::Identity => x,
        }
    }
}

/// Temporal offsets of the `k` taps.
///
/// With `window == 1` these are the standard `s − ⌊k/2⌋`. A larger window
/// spreads the taps over `window·(k+1)` timestamps:
/// `round(linspace(−window·(k+1)/2, window·(k+1)/2, k))`.
pub fn tap_offsets(k: usize, window: usize) -> Result<Vec<isize>> {
    check_odd(k)?;
    if window == 0 {
        return config_err("window factor must be at least 1");
    }
    if window == 1 || k == 1 {
        return Ok(tensor::centered_offsets(k));
    }
    let half = (window * (k + 1)) as f64 / 2.0;
    let step = 2.0 * half / (k - 1) as f64;
    Ok((0..k)
        .map(|s| (-half + step * s as f64).round() as isize)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DfaConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub formation: Formation,
    pub gate: Gate,
    pub window: usize,
    pub depthwise: bool,
    pub bias: bool,
}

impl DfaConfig {
    /// Depthwise operator over `c` channels.
    pub fn depthwise(c: usize, k: usize) -> Self {
        Self {
            c_in: c,
            c_out: c,
            k,
            formation: Formation::K,
            gate: Gate::Relu,
            window: 1,
            depthwise: true,
            bias: true,
        }
    }

    pub fn dense(c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            depthwise: false,
            c_out,
            ..Self::depthwise(c_in, k)
        }
    }

    pub fn with_formation(mut self, formation: Formation) -> Self {
        self.formation = formation;
        self
    }

    pub fn with_gate(mut self, gate: Gate) -> Self {
        self.gate = gate;
        self
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn mask_channels(&self) -> usize {
        self.formation.mask_channels(self.c_in, self.k)
    }

    fn validate(&self) -> Result<()> {
        check_odd(self.k)?;
        if self.c_in == 0 || self.c_out == 0 {
            return config_err("DFA channel counts must be positive");
        }
        if self.depthwise && self.c_in != self.c_out {
            return config_err(format!(
                "depthwise DFA needs C_in == C_out, got {} and {}",
                self.c_in, self.c_out
            ));
        }
        if self.window == 0 {
            return config_err("window factor must be at least 1");
        }
        Ok(())
    }
}

/// The light-weight mask generator Ψ: a depthwise convolution, followed by a
/// pointwise projection when the mask width differs from `C_in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskGenerator {
    pub c_in: usize,
    pub c_m: usize,
    pub dw_weight: ParamId,
    pub dw_bias: ParamId,
    pub proj: Option<(ParamId, ParamId)>,
}

impl MaskGenerator {
    /// The final bias starts at +1 so that gated masks start near one.
    pub fn init<R: Rng>(init: &mut Init<'_, R>, name: &str, c_in: usize, c_m: usize) -> Self {
        init.scoped(name, |init| {
            let needs_proj = c_m != c_in;
            let dw_weight = init.kernel("dw", &[c_in, PSI_KERNEL], PSI_KERNEL, 0.5);
            let dw_bias = init.constant("dw_bias", &[c_in], if needs_proj { 0.0 } else { 1.0 });
            let proj = needs_proj.then(|| {
                (
                    init.kernel("proj", &[c_m, c_in], c_in, 0.5),
                    init.constant("proj_bias", &[c_m], 1.0),
                )
            });
            Self { c_in, c_m, dw_weight, dw_bias, proj }
        })
    }

    /// Pre-gate output Ψ(f), `[C_m × T]`.
    pub fn scores(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        let c_in = g.value(f).rows();
        if c_in != self.c_in {
            return dim_err(format!(
                "mask generator expects {} input channels, got {c_in}",
                self.c_in
            ));
        }
        let w = g.param(store, self.dw_weight);
        let b = g.param(store, self.dw_bias);
        let mut h = g.depthwise_conv(f, w, Some(b), &tensor::centered_offsets(PSI_KERNEL))?;
        if let Some((pw, pb)) = self.proj {
            let pw = g.param(store, pw);
            let pb = g.param(store, pb);
            h = g.pointwise_conv(h, pw, Some(pb))?;
        }
        Ok(h)
    }

    /// Makes the generator output `value` on every row regardless of input.
    /// The bias added last, which sets the initial mask level.
    pub fn output_bias(&self) -> ParamId {
        self.proj.map_or(self.dw_bias, |(_, b)| b)
    }

    pub fn set_constant(&self, store: &mut ParamStore, value: f64) {
        let fill = |store: &mut ParamStore, id: ParamId, v: f64| {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::full(&shape, v));
        };
        fill(store, self.dw_weight, 0.0);
        match self.proj {
            Some((w, b)) => {
                fill(store, self.dw_bias, 0.0);
                fill(store, w, 0.0);
                fill(store, b, value);
            }
            None => fill(store, self.dw_bias, value),
        }
    }
}

/// Parameters of one DFA operator.
///
/// Dense kernels are stored as `[C_out × k·C_in]` with column `s·C_in + i`
/// holding `K[o, i, s]`, i.e. already in shifted-stack order. Depthwise
/// kernels are `[C × k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DfaParams {
    pub name: String,
    pub config: DfaConfig,
    pub offsets: Vec<isize>,
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub psi: MaskGenerator,
}

impl DfaParams {
    /// Registers a fresh operator. Kernels are drawn with `1/√fan_in`
    /// scaling; the generator's final bias is +1 so initial masks sit near
    /// one and the operator starts close to a plain convolution.
    pub fn init<R: Rng>(init: &mut Init<'_, R>, name: &str, config: DfaConfig) -> Result<Self> {
        config.validate()?;
        let offsets = tap_offsets(config.k, config.window)?;
        let (c_in, c_out, k, c_m) = (config.c_in, config.c_out, config.k, config.mask_channels());
        init.scoped(name, |init| {
            let (kernel, bias) = if config.depthwise {
                (init.kernel("kernel", &[c_in, k], k, 1.0), config.bias.then(|| init.constant("bias", &[c_in], 0.0)))
            } else {
                (
                    init.kernel("kernel", &[c_out, k * c_in], k * c_in, 1.0),
                    config.bias.then(|| init.constant("bias", &[c_out], 0.0)),
                )
            };
            let psi = MaskGenerator::init(init, "psi", c_in, c_m);
            Ok(Self {
                name: init.prefix().to_string(),
                config: config.clone(),
                offsets,
                kernel,
                bias,
                psi,
            })
        })
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    /// Sets the mask generator so that it outputs the constant `value` on
    /// every row regardless of input.
    pub fn set_constant_psi(&self, store: &mut ParamStore, value: f64) {
        self.psi.set_constant(store, value);
    }
}

/// `[C_in × T] → [k·C_in × T]` stack of shifted copies.
pub fn shift(f: &Tensor, k: usize) -> Result<Tensor> {
    check_odd(k)?;
    tensor::shift(f, &tensor::centered_offsets(k))
}

/// Expands a `[C_m × T]` mask to the `[k·C_in × T]` stack layout.
pub fn upsample_mask(mask: &Tensor, formation: Formation, c_in: usize, k: usize) -> Result<Tensor> {
    let c_m = formation.mask_channels(c_in, k);
    if mask.rows() != c_m {
        return dim_err(format!(
            "{formation:?} mask needs {c_m} rows for C_in={c_in}, k={k}; got {}",
            mask.rows()
        ));
    }
    tensor::gather_rows(mask, &formation.upsample_index(c_in, k))
}

/// Pre-gate generator output Ψ(f).
pub fn psi_scores(g: &mut Graph, store: &ParamStore, f: Var, p: &DfaParams) -> Result<Var> {
    p.psi.scores(g, store, f)
}

/// `M = φ(Ψ(f))`.
pub fn make_mask(g: &mut Graph, store: &ParamStore, f: Var, p: &DfaParams) -> Result<Var> {
    let scores = psi_scores(g, store, f, p)?;
    let m = p.config.gate.apply(g, scores);
    g.tag(|| format!("{}.mask", p.name), m);
    Ok(m)
}

/// Masked aggregation with an explicit `[C_m × T]` mask node.
pub fn aggregate_with_mask(
    g: &mut Graph,
    store: &ParamStore,
    f: Var,
    mask: Var,
    p: &DfaParams,
) -> Result<Var> {
    let cfg = &p.config;
    let stack = g.shift(f, &p.offsets)?;
    let up = match cfg.formation {
        Formation::CK => mask,
        form => g.gather_rows(mask, form.upsample_index(cfg.c_in, cfg.k))?,
    };
    if g.value(up).rows() != g.value(stack).rows() {
        return dim_err(format!(
            "{}: mask expands to {} rows, stack has {}",
            p.name,
            g.value(up).rows(),
            g.value(stack).rows()
        ));
    }
    let masked = g.mul(up, stack)?;
    aggregate(g, store, masked, p)
}

fn aggregate(g: &mut Graph, store: &ParamStore, stack: Var, p: &DfaParams) -> Result<Var> {
    let kernel = g.param(store, p.kernel);
    let bias = p.bias.map(|b| g.param(store, b));
    if p.config.depthwise {
        g.depthwise_aggregate(stack, kernel, bias)
    } else {
        g.pointwise_conv(stack, kernel, bias)
    }
}

/// Convolution-style DFA: `y = Σ_s K_s(↑(φ(Ψ(f)))_s ⊙ shift(f)_s)`.
pub fn dfa_conv(g: &mut Graph, store: &ParamStore, f: Var, p: &DfaParams) -> Result<Var> {
    let mask = make_mask(g, store, f, p)?;
    aggregate_with_mask(g, store, f, mask, p)
}

/// Attention-style DFA over the `k` taps of a depthwise operator.
///
/// Gated scores are sum-normalized per timestamp with an ε guard, so a tap
/// whose gate is zero gets exactly zero weight and a timestamp whose gates
/// are all zero produces only the bias.
pub fn dfa_att(g: &mut Graph, store: &ParamStore, f: Var, p: &DfaParams) -> Result<Var> {
    let cfg = &p.config;
    if !cfg.depthwise || cfg.formation != Formation::K {
        return config_err(format!("{}: attention DFA must be depthwise with K formation", p.name));
    }
    let scores = psi_scores(g, store, f, p)?;
    let gates = cfg.gate.apply(g, scores);
    g.tag(|| format!("{}.gate", p.name), gates);
    let att = g.tap_normalize(gates, ATT_EPS)?;
    aggregate_with_mask(g, store, f, att, p)
}

/// Forward-only convenience wrappers.
impl DfaParams {
    pub fn conv(&self, store: &ParamStore, f: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(f.clone());
        let y = dfa_conv(&mut g, store, x, self)?;
        Ok(g.value(y).clone())
    }

    pub fn att(&self, store: &ParamStore, f: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(f.clone());
        let y = dfa_att(&mut g, store, x, self)?;
        Ok(g.value(y).clone())
    }

    pub fn mask(&self, store: &ParamStore, f: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(f.clone());
        let m = make_mask(&mut g, store, x, self)?;
        Ok(g.value(m).clone())
    }

    pub fn conv_with_mask(&self, store: &ParamStore, f: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(f.clone());
        let m = g.input(mask.clone());
        let y = aggregate_with_mask(&mut g, store, x, m, self)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn build(config: DfaConfig) -> (ParamStore, DfaParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DfaParams::init(&mut Init::new(&mut store, &mut rng), "op", config).unwrap();
        (store, p)
    }

    #[test]
    fn shift_examples() {
        let f = Tensor::from_rows(&[[1.0, 2.0, 3.0, 4.0]]);
        let s = shift(&f, 3).unwrap();
        assert_eq!(
            s,
            Tensor::from_rows(&[[0.0, 1.0, 2.0, 3.0], [1.0, 2.0, 3.0, 4.0], [2.0, 3.0, 4.0, 0.0]])
        );
        assert_eq!(shift(&f, 1).unwrap(), f);
        assert!(matches!(shift(&f, 2), Err(crate::Error::Config(_))));

        let f2 = Tensor::from_rows(&[[1.0, 2.0], [10.0, 20.0]]);
        let s = shift(&f2, 3).unwrap();
        assert_eq!(s.row(0), &[0.0, 1.0]);
        assert_eq!(s.row(1), &[0.0, 10.0]);
        assert_eq!(s.row(2), &[1.0, 2.0]);
        assert_eq!(s.row(3), &[10.0, 20.0]);
        assert_eq!(s.row(4), &[2.0, 0.0]);
        assert_eq!(s.row(5), &[20.0, 0.0]);
    }

    #[test]
    fn upsample_mask_layouts() {
        let m = Tensor::from_rows(&[[1.0], [2.0], [3.0]]);
        let up = upsample_mask(&m, Formation::K, 2, 3).unwrap();
        assert_eq!(up.data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);

        let m = Tensor::from_rows(&[[1.0], [2.0]]);
        let up = upsample_mask(&m, Formation::C, 2, 3).unwrap();
        assert_eq!(up.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);

        let m = Tensor::from_rows(&[[1.0], [2.0], [3.0], [4.0]]);
        assert!(upsample_mask(&m, Formation::CK, 2, 3).is_err());
        let m6 = Tensor::from_rows(&[[1.0], [2.0], [3.0], [4.0], [5.0], [6.0]]);
        assert_eq!(upsample_mask(&m6, Formation::CK, 2, 3).unwrap(), m6);
        assert!(matches!(
            upsample_mask(&m, Formation::K, 2, 3),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn tap_offsets_windowed() {
        assert_eq!(tap_offsets(3, 1).unwrap(), vec![-1, 0, 1]);
        assert_eq!(tap_offsets(3, 5).unwrap(), vec![-10, 0, 10]);
        assert_eq!(tap_offsets(5, 2).unwrap(), vec![-6, -3, 0, 3, 6]);
        assert_eq!(tap_offsets(1, 4).unwrap(), vec![0]);
        assert!(tap_offsets(4, 1).is_err());
        assert!(tap_offsets(3, 0).is_err());
    }

    #[test]
    fn constant_generator_masks() {
        let f = Tensor::from_rows(&[[0.3, -1.0, 2.0], [1.0, 1.0, -4.0]]);
        for formation in [Formation::K, Formation::C, Formation::CK] {
            let (mut store, p) = build(DfaConfig::depthwise(2, 3).with_formation(formation));
            p.set_constant_psi(&mut store, 1.0);
            let m = p.mask(&store, &f).unwrap();
            assert_eq!(m.rows(), formation.mask_channels(2, 3));
            assert!(m.data().iter().all(|&v| v == 1.0));

            p.set_constant_psi(&mut store, -1.0);
            let m = p.mask(&store, &f).unwrap();
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
        let (mut store, p) = build(DfaConfig::depthwise(2, 3).with_gate(Gate::RestrictedTanh));
        p.set_constant_psi(&mut store, 10.0);
        let m = p.mask(&store, &f).unwrap();
        assert!(m.data().iter().all(|&v| (v - 10f64.tanh()).abs() < 1e-15));
        assert!(m.data().iter().all(|&v| v > 0.99999999));
    }

    #[test]
    fn center_tap_zeroed_example() {
        // C_in = C_out = 1, K = [1,1,1], center mask row zero
        let (mut store, p) = build(DfaConfig::dense(1, 1, 3).without_bias());
        store.set(p.kernel, Tensor::from_rows(&[[1.0, 1.0, 1.0]]));
        let f = Tensor::from_rows(&[[1.0, 2.0, 3.0, 4.0]]);
        let mask = Tensor::from_rows(&[[1.0; 4], [0.0; 4], [1.0; 4]]);
        let y = p.conv_with_mask(&store, &f, &mask).unwrap();
        assert_eq!(y, Tensor::from_rows(&[[2.0, 4.0, 6.0, 3.0]]));
    }

    #[test]
    fn ones_mask_matches_plain_conv() {
        let (mut store, p) = build(DfaConfig::dense(2, 3, 3).with_formation(Formation::C));
        p.set_constant_psi(&mut store, 1.0);
        let f = Tensor::from_rows(&[[0.5, -1.0, 2.0, 0.0, 1.5], [1.0, 3.0, -2.0, 0.5, 0.25]]);
        // rebuild [C_out, C_in, k] from stack-ordered kernel
        let kv = store.get(p.kernel).clone();
        let mut w = Tensor::zeros(&[3, 2, 3]);
        for o in 0..3 {
            for i in 0..2 {
                for s in 0..3 {
                    w.data_mut()[(o * 2 + i) * 3 + s] = kv.at(o, s * 2 + i);
                }
            }
        }
        let bias = store.get(p.bias.unwrap()).clone();
        let reference = tensor::conv1d(&f, &w, Some(&bias), &[-1, 0, 1]).unwrap();
        assert!(p.conv(&store, &f).unwrap().max_abs_diff(&reference) < 1e-12);
    }

    #[test]
    fn att_uniform_and_identity_routing() {
        let (mut store, p) = build(DfaConfig::depthwise(2, 3).without_bias());
        let f = Tensor::from_rows(&[[0.5, -1.0, 2.0, 3.0], [1.0, 3.0, -2.0, 0.5]]);

        // equal positive gates → uniform taps
        p.set_constant_psi(&mut store, 2.0);
        store.set(p.kernel, Tensor::full(&[2, 3], 1.0));
        let y = p.att(&store, &f).unwrap();
        let box3 = tensor::depthwise_conv1d_same(&f, &Tensor::full(&[2, 3], 1.0 / 3.0)).unwrap();
        assert!(y.max_abs_diff(&box3) < 1e-8);

        // gate only the center tap, unit kernel → identity
        p.set_constant_psi(&mut store, 0.0);
        let (_, pb) = p.psi.proj.unwrap();
        store.set(pb, Tensor::new(vec![3], vec![-1.0, 1.0, -1.0]).unwrap());
        let y = p.att(&store, &f).unwrap();
        assert!(y.max_abs_diff(&f) < 1e-7);

        // all gates zero → zero output
        p.set_constant_psi(&mut store, -3.0);
        let y = p.att(&store, &f).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn att_rejects_non_depthwise() {
        let (store, p) = build(DfaConfig::dense(2, 2, 3));
        assert!(p.att(&store, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn wrong_input_channels() {
        let (store, p) = build(DfaConfig::depthwise(2, 3));
        assert!(matches!(
            p.conv(&store, &Tensor::zeros(&[3, 4])),
            Err(crate::Error::Dimension(_))
        ));
    }
}
