//! Central finite differences, used as an independent oracle for the
//! analytic gradients recorded by [`Graph`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detection::{loss_terms, total_loss, ClsHead, RegHead, Segment};
use crate::dfa::{dfa_att, dfa_conv, DfaConfig, DfaParams, Formation, Gate};
use crate::dyhead::{DyHead, DyHeadConfig};
use crate::encoder::{DynELayer, Embedding, EncoderConfig, EncoderKind, LevelVar};
use crate::error::Result;
use crate::graph::{Graph, RegTarget, Var};
use crate::model::{Model, ModelConfig};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Default finite-difference step (64-bit).
pub const FD_STEP: f64 = 1e-5;

/// Default pass threshold for the max relative error.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Central-difference estimate of `∇f(x)`, one element at a time.
pub fn finite_difference_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Element-wise relative error `|a − b| / max(|a|, |b|, 1e-8)`, maximized.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Outcome of comparing analytic and numeric gradients for one scalar
/// function.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// Number of scalar entries compared.
    pub checked: usize,
    pub max_rel_error: f64,
    /// Name of the tensor holding the worst entry.
    pub worst: String,
}

impl GradCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compares gradients of a scalar function of `inputs` and the parameters in
/// `params` against central differences.
///
/// `build` must construct the same scalar node deterministically from the
/// given graph, store and input vars.
pub fn check_graph<F>(
    name: &str,
    store: &ParamStore,
    params: &[ParamId],
    inputs: &[Tensor],
    step: f64,
    build: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, store, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, store, &vars)?;
    g.backward(loss)?;

    let mut report = GradCheck {
        name: name.to_string(),
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    let mut record = |label: String, analytic: &Tensor, numeric: &Tensor| {
        report.checked += analytic.len();
        let e = max_relative_error(analytic, numeric);
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = label;
        }
    };

    for (i, (x, v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = finite_difference_grad(
            |probe| {
                let mut ins = inputs.to_vec();
                ins[i] = probe.clone();
                eval(store, &ins).unwrap_or(f64::NAN)
            },
            x,
            step,
        );
        record(format!("input[{i}]"), &analytic, &numeric);
    }

    let grads: std::collections::BTreeMap<ParamId, Tensor> =
        g.param_grads().map(|(id, t)| (id, t.clone())).collect();
    for &id in params {
        let value = store.get(id);
        let analytic = grads
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        let numeric = finite_difference_grad(
            |probe| {
                let mut s = store.clone();
                s.set(id, probe.clone());
                eval(&s, inputs).unwrap_or(f64::NAN)
            },
            value,
            step,
        );
        record(store.name(id).to_string(), &analytic, &numeric);
    }
    Ok(report)
}

/// A fixed `[shape]` weighting used to reduce a tensor node to a scalar with
/// gradients of order one everywhere.
fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let w = random_tensor(&shape, seed, 1.0);
    let w = g.input(w);
    let prod = g.mul(v, w)?;
    Ok(g.sum(prod))
}

fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

type Builder = Box<dyn Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    step: f64,
    store: ParamStore,
    inputs: Vec<Tensor>,
    build: Builder,
}

impl Case {
    fn new(
        name: impl Into<String>,
        store: ParamStore,
        inputs: Vec<Tensor>,
        build: impl Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self { name: name.into(), step: FD_STEP, store, inputs, build: Box::new(build) }
    }

    fn run(&self) -> Result<GradCheck> {
        let params: Vec<ParamId> = self.store.ids().collect();
        check_graph(&self.name, &self.store, &params, &self.inputs, self.step, &self.build)
    }
}

/// Builds parameters with a scoped initializer.
fn with_params<T>(seed: u64, f: impl FnOnce(&mut Init<'_, ChaCha8Rng>) -> Result<T>) -> Result<(ParamStore, T)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = f(&mut Init::new(&mut store, &mut rng))?;
    Ok((store, out))
}

fn tensor_cases() -> Vec<Case> {
    let x = || random_tensor(&[3, 7], 11, 1.0);
    let mut cases = vec![
        Case::new("pointwise_conv", ParamStore::new(), vec![x(), random_tensor(&[2, 3], 12, 1.0), random_tensor(&[2], 13, 1.0)], |g, _, v| {
            let y = g.pointwise_conv(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y, 1)
        }),
        Case::new("conv1d", ParamStore::new(), vec![x(), random_tensor(&[2, 3, 3], 14, 1.0), random_tensor(&[2], 15, 1.0)], |g, _, v| {
            let y = g.conv1d(v[0], v[1], Some(v[2]), &[-2, 0, 3])?;
            weighted_sum(g, y, 2)
        }),
        Case::new("depthwise_conv", ParamStore::new(), vec![x(), random_tensor(&[3, 3], 16, 1.0), random_tensor(&[3], 17, 1.0)], |g, _, v| {
            let y = g.depthwise_conv(v[0], v[1], Some(v[2]), &[-1, 0, 1])?;
            weighted_sum(g, y, 3)
        }),
        Case::new("shift_gather_aggregate", ParamStore::new(), vec![x(), random_tensor(&[3, 3], 18, 1.0)], |g, _, v| {
            let s = g.shift(v[0], &[-1, 0, 2])?;
            let s2 = g.gather_rows(s, (0..9).rev().collect())?;
            let y = g.depthwise_aggregate(s2, v[1], None)?;
            weighted_sum(g, y, 4)
        }),
        Case::new("max_pool_upsample", ParamStore::new(), vec![x()], |g, _, v| {
            let p = g.max_pool_ds2(v[0])?;
            let u = g.upsample_x2(p, 7)?;
            weighted_sum(g, u, 5)
        }),
        Case::new("layer_norm", ParamStore::new(), vec![x(), random_tensor(&[3], 19, 1.0), random_tensor(&[3], 20, 1.0)], |g, _, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(g, y, 6)
        }),
        Case::new("group_norm", ParamStore::new(), vec![random_tensor(&[4, 5], 21, 1.0), random_tensor(&[4], 22, 1.0), random_tensor(&[4], 23, 1.0)], |g, _, v| {
            let y = g.group_norm(v[0], 2, v[1], v[2])?;
            weighted_sum(g, y, 7)
        }),
        Case::new("pointwise_nonlinearities", ParamStore::new(), vec![x()], |g, _, v| {
            let a = g.sigmoid(v[0]);
            let b = g.restricted_tanh(v[0]);
            let c = g.softmax_axis0(v[0])?;
            let ab = g.mul(a, b)?;
            let y = g.add(ab, c)?;
            weighted_sum(g, y, 8)
        }),
        Case::new("channel_mean_tap_normalize", ParamStore::new(), vec![random_tensor(&[3, 7], 24, 1.0).map(|v| v.abs() + 0.1), random_tensor(&[1], 25, 1.0)], |g, _, v| {
            let m = g.channel_mean(v[0])?;
            let n = g.tap_normalize(v[0], 1e-8)?;
            let wide = g.gather_rows(m, vec![0; 3])?;
            let y = g.add(n, wide)?;
            let y = g.scale_by(y, v[1])?;
            weighted_sum(g, y, 9)
        }),
    ];
    cases.push(Case::new("focal_loss", ParamStore::new(), vec![random_tensor(&[2, 4], 26, 1.0).map(|v| 0.5 + 0.45 * v)], |g, _, v| {
        let y = Tensor::from_rows(&[[1.0, 0.0, 0.3, 1.0], [0.0, 0.0, 1.0, 0.7]]);
        g.focal_loss(v[0], y, 0.25, 2.0)
    }));
    cases.push(Case::new(
        "diou_loss",
        ParamStore::new(),
        vec![Tensor::from_rows(&[[1.0, 0.3, 2.5, 0.7], [2.0, 1.7, 0.4, 3.1]])],
        |g, _, v| {
            let targets = vec![
                RegTarget { t: 0, start: 1.5, end: 1.2 },
                RegTarget { t: 1, start: 0.1, end: 2.2 },
                RegTarget { t: 2, start: 4.0, end: 3.0 },
                RegTarget { t: 3, start: 0.2, end: 0.5 },
            ];
            g.diou_loss(v[0], targets)
        },
    ));
    cases
}

fn dfa_cases() -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    let variants = [
        ("dfa_conv.K.dense", DfaConfig::dense(3, 2, 3), Gate::Relu, 1),
        ("dfa_conv.C.dense", DfaConfig::dense(3, 2, 3).with_formation(Formation::C), Gate::RestrictedTanh, 1),
        ("dfa_conv.CK.dense", DfaConfig::dense(3, 2, 3).with_formation(Formation::CK), Gate::Identity, 1),
        ("dfa_conv.K.depthwise.window", DfaConfig::depthwise(3, 3), Gate::Relu, 2),
        ("dfa_conv.C.depthwise.k5", DfaConfig::depthwise(3, 5).with_formation(Formation::C), Gate::Relu, 1),
    ];
    for (i, (name, cfg, gate, window)) in variants.into_iter().enumerate() {
        let cfg = cfg.with_gate(gate).with_window(window);
        let (store, p) = with_params(100 + i as u64, |init| DfaParams::init(init, "op", cfg))?;
        cases.push(Case::new(name, store, vec![random_tensor(&[3, 9], 30 + i as u64, 1.0)], move |g, s, v| {
            let y = dfa_conv(g, s, v[0], &p)?;
            weighted_sum(g, y, 10)
        }));
    }
    let (store, p) = with_params(110, |init| DfaParams::init(init, "att", DfaConfig::depthwise(3, 3)))?;
    cases.push(Case::new("dfa_att", store, vec![random_tensor(&[3, 9], 40, 1.0)], move |g, s, v| {
        let y = dfa_att(g, s, v[0], &p)?;
        weighted_sum(g, y, 11)
    }));
    Ok(cases)
}

fn toy_encoder_config(kind: EncoderKind) -> EncoderConfig {
    EncoderConfig {
        c_feat: 3,
        width: 4,
        num_down: 2,
        window: 2,
        kind,
        ..Default::default()
    }
}

fn encoder_cases() -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for (name, kind, down) in [
        ("dyne_layer.stem", EncoderKind::DynE, false),
        ("dyne_layer.downsample", EncoderKind::DynE, true),
        ("plain_layer.downsample", EncoderKind::PlainConv, true),
    ] {
        let cfg = toy_encoder_config(kind);
        let (store, layer) = with_params(120, |init| DynELayer::init(init, "layer", &cfg, down))?;
        cases.push(Case::new(name, store, vec![random_tensor(&[4, 9], 50, 1.0)], move |g, s, v| {
            let y = layer.forward(g, s, v[0])?;
            weighted_sum(g, y, 12)
        }));
    }
    let (store, embed) = with_params(121, |init| Ok(Embedding::init(init, 3, 4)))?;
    cases.push(Case::new("embed", store, vec![random_tensor(&[3, 6], 51, 1.0)], move |g, s, v| {
        let y = embed.forward(g, s, v[0])?;
        weighted_sum(g, y, 13)
    }));
    Ok(cases)
}

fn head_cases() -> Result<Vec<Case>> {
    let cfg = DyHeadConfig { width: 3, depth: 2, ..Default::default() };
    let mut cases = Vec::new();
    let (mut store, head) = with_params(130, |init| DyHead::init(init, "head", &cfg))?;
    // move γ, α away from their initial values so both enter non-trivially
    store.set(head.rounds[0].gamma, Tensor::scalar(0.7));
    store.set(head.rounds[0].alpha, Tensor::scalar(1.3));
    let h = head.clone();
    cases.push(Case::new(
        "fuse_level",
        store.clone(),
        vec![random_tensor(&[3, 9], 60, 1.0), random_tensor(&[3, 5], 61, 1.0), random_tensor(&[3, 3], 62, 1.0)],
        move |g, s, v| {
            let y = h.fuse_level(
                g,
                s,
                Some(LevelVar { var: v[0], stride: 2 }),
                LevelVar { var: v[1], stride: 4 },
                Some(LevelVar { var: v[2], stride: 8 }),
                0,
            )?;
            weighted_sum(g, y, 14)
        },
    ));
    let h = head.clone();
    cases.push(Case::new("depth_step.stacked", store.clone(), vec![random_tensor(&[3, 8], 63, 1.0)], move |g, s, v| {
        let a = h.depth_step(g, s, v[0], 0)?;
        let b = h.depth_step(g, s, a, 1)?;
        weighted_sum(g, b, 15)
    }));
    let h = head;
    cases.push(Case::new(
        "dyhead_forward",
        store,
        vec![random_tensor(&[3, 8], 64, 1.0), random_tensor(&[3, 4], 65, 1.0)],
        move |g, s, v| {
            let out = h.forward(g, s, &[LevelVar { var: v[0], stride: 2 }, LevelVar { var: v[1], stride: 4 }])?;
            let a = weighted_sum(g, out[0].var, 16)?;
            let b = weighted_sum(g, out[1].var, 17)?;
            g.add(a, b)
        },
    ));

    let (store, (cls, reg)) = with_params(131, |init| Ok((ClsHead::init(init, 3, 2), RegHead::init(init, 3))))?;
    cases.push(Case::new("classify", store.clone(), vec![random_tensor(&[3, 6], 66, 1.0)], move |g, s, v| {
        let y = cls.forward(g, s, v[0])?;
        weighted_sum(g, y, 18)
    }));
    cases.push(Case::new("regress", store, vec![random_tensor(&[3, 6], 67, 1.0)], move |g, s, v| {
        let y = reg.forward(g, s, v[0])?;
        weighted_sum(g, y, 19)
    }));
    Ok(cases)
}

fn total_loss_case() -> Result<Case> {
    let cfg = ModelConfig {
        encoder: toy_encoder_config(EncoderKind::DynE),
        head: DyHeadConfig { width: 4, depth: 1, ..Default::default() },
        num_classes: 2,
        ..Default::default()
    };
    let (model, store) = Model::new(&cfg, 140)?;
    let gt = [Segment::new(2.0, 9.0, 0), Segment::new(9.5, 15.0, 1)];
    let targets = model.assign(&gt, 16)?;
    let loss_cfg = cfg.loss.clone();
    Ok(Case::new("total_loss", store, vec![random_tensor(&[3, 16], 70, 1.0)], move |g, s, v| {
        let fwd = model.forward(g, s, v[0])?;
        let terms = loss_terms(g, &fwd.outputs, &targets, &loss_cfg)?;
        Ok(total_loss(g, &[terms], &loss_cfg)?.0)
    }))
}

/// Runs every gradient check: tensor operations, DFA operators, encoder
/// layers, head fusion, output layers, losses and the full model loss.
pub fn standard_suite() -> Result<Vec<GradCheck>> {
    let mut cases = tensor_cases();
    cases.extend(dfa_cases()?);
    cases.extend(encoder_cases()?);
    cases.extend(head_cases()?);
    cases.push(total_loss_case()?);
    cases.iter().map(Case::run).collect()
}
