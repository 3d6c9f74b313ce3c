//! Reverse-mode differentiation over the kernels in [`crate::tensor`].
//!
//! A [`Graph`] is a Wengert list: every operation appends a node holding its
//! forward value plus whatever it needs for the backward pass. Calling
//! [`Graph::backward`] on a scalar node walks the list in reverse once and
//! accumulates gradients into the leaf nodes (inputs and parameters). Leaf
//! gradients persist across calls until [`Graph::zero_grad`].

use std::collections::BTreeMap;

use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// Clamp applied to `log` arguments inside the focal loss.
pub const LOG_CLAMP: f64 = 1e-8;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    PointwiseConv { x: Var, w: Var, b: Option<Var> },
    Conv1d { x: Var, w: Var, b: Option<Var>, offsets: Vec<isize> },
    DepthwiseConv { x: Var, w: Var, b: Option<Var>, offsets: Vec<isize> },
    Shift { x: Var, offsets: Vec<isize> },
    GatherRows { x: Var, index: Vec<usize> },
    DepthwiseAggregate { stack: Var, kernel: Var, b: Option<Var> },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var },
    Norm { x: Var, gain: Var, offset: Var, group: usize, whole_group: bool, xhat: Tensor, inv_std: Vec<f64> },
    Relu(Var),
    Sigmoid(Var),
    RestrictedTanh(Var),
    Softmax(Var),
    ChannelMean(Var),
    TapNormalize { x: Var, eps: f64 },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleBy { x: Var, s: Var },
    ScaleConst { x: Var, c: f64 },
    Sum(Var),
    Focal { probs: Var, targets: Tensor, alpha: f64, gamma: f64 },
    Diou { pred: Var, targets: Vec<RegTarget> },
}

/// A regression target at one timestamp: offsets to start and end.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegTarget {
    pub t: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    leaf_grads: BTreeMap<Var, Tensor>,
    tracing: bool,
    tags: Vec<(String, Var)>,
    tag_context: String,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that keeps named intermediate values (see [`Graph::tag`]).
    pub fn with_tracing() -> Self {
        Self {
            tracing: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf for a stored parameter. Repeated requests for the same id return
    /// the same node, so its gradient is accumulated once.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    /// Records `v` under `name` when tracing is enabled.
    pub fn tag(&mut self, name: impl FnOnce() -> String, v: Var) {
        if self.tracing {
            let name = if self.tag_context.is_empty() {
                name()
            } else {
                format!("{}/{}", self.tag_context, name())
            };
            self.tags.push((name, v));
        }
    }

    /// Prefix for subsequent tags, e.g. the pyramid level being processed.
    pub fn set_tag_context(&mut self, context: impl Into<String>) {
        self.tag_context = context.into();
    }

    pub fn tags(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tags.iter().map(|(n, v)| (n.as_str(), self.value(*v)))
    }

    // ---- operations -------------------------------------------------------

    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = tensor::pointwise_conv(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::PointwiseConv { x, w, b }))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, offsets: &[isize]) -> Result<Var> {
        let y = tensor::conv1d(self.value(x), self.value(w), b.map(|b| self.value(b)), offsets)?;
        Ok(self.push(y, Op::Conv1d { x, w, b, offsets: offsets.to_vec() }))
    }

    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Option<Var>, offsets: &[isize]) -> Result<Var> {
        let y = tensor::depthwise_conv1d(self.value(x), self.value(w), b.map(|b| self.value(b)), offsets)?;
        Ok(self.push(y, Op::DepthwiseConv { x, w, b, offsets: offsets.to_vec() }))
    }

    pub fn shift(&mut self, x: Var, offsets: &[isize]) -> Result<Var> {
        let y = tensor::shift(self.value(x), offsets)?;
        Ok(self.push(y, Op::Shift { x, offsets: offsets.to_vec() }))
    }

    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let y = tensor::gather_rows(self.value(x), &index)?;
        Ok(self.push(y, Op::GatherRows { x, index }))
    }

    pub fn depthwise_aggregate(&mut self, stack: Var, kernel: Var, b: Option<Var>) -> Result<Var> {
        let y = tensor::depthwise_aggregate(self.value(stack), self.value(kernel), b.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::DepthwiseAggregate { stack, kernel, b }))
    }

    pub fn max_pool_ds2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = tensor::max_pool_ds2_with_argmax(self.value(x))?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn upsample_x2(&mut self, x: Var, target_t: usize) -> Result<Var> {
        let y = tensor::linear_upsample_x2(self.value(x), target_t)?;
        Ok(self.push(y, Op::Upsample { x }))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var> {
        let c = self.value(x).rows();
        self.norm(x, gain, offset, c, false)
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gain: Var, offset: Var) -> Result<Var> {
        let c = self.value(x).rows();
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        self.norm(x, gain, offset, c / groups, true)
    }

    fn norm(&mut self, x: Var, gain: Var, offset: Var, group: usize, whole_group: bool) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return dim_err(format!("normalization input must be rank-2, got {:?}", xv.shape()));
        }
        let c = xv.rows();
        if self.value(gain).len() != c || self.value(offset).len() != c {
            return dim_err("normalization affine parameter length mismatch");
        }
        let stats = tensor::norm_stats(xv, group, whole_group);
        let mut y = stats.xhat.clone();
        tensor::apply_affine(&mut y, self.value(gain), self.value(offset));
        Ok(self.push(
            y,
            Op::Norm { x, gain, offset, group, whole_group, xhat: stats.xhat, inv_std: stats.inv_std },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = tensor::relu(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = tensor::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x))
    }

    pub fn restricted_tanh(&mut self, x: Var) -> Var {
        let y = tensor::restricted_tanh(self.value(x));
        self.push(y, Op::RestrictedTanh(x))
    }

    pub fn softmax_axis0(&mut self, x: Var) -> Result<Var> {
        let y = tensor::softmax_axis0(self.value(x))?;
        Ok(self.push(y, Op::Softmax(x)))
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let y = tensor::channel_mean(self.value(x))?;
        Ok(self.push(y, Op::ChannelMean(x)))
    }

    pub fn tap_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let y = tensor::tap_normalize(self.value(x), eps)?;
        Ok(self.push(y, Op::TapNormalize { x, eps }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    /// Multiplies `x` by a learnable single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return dim_err("scale_by: factor must hold one element");
        }
        let f = self.value(s).item();
        let y = self.value(x).scale(f);
        Ok(self.push(y, Op::ScaleBy { x, s }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).scale(c);
        self.push(y, Op::ScaleConst { x, c })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x))
    }

    /// Summed focal loss of probabilities against `{0,1}` targets.
    pub fn focal_loss(&mut self, probs: Var, targets: Tensor, alpha: f64, gamma: f64) -> Result<Var> {
        let p = self.value(probs);
        if p.shape() != targets.shape() {
            return dim_err(format!(
                "focal_loss: probs {:?} vs targets {:?}",
                p.shape(),
                targets.shape()
            ));
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &y)| focal_terms(p, y, alpha, gamma).0)
            .sum();
        Ok(self.push(Tensor::scalar(total), Op::Focal { probs, targets, alpha, gamma }))
    }

    /// Summed DIoU loss of predicted `[2 × T]` offsets at the listed
    /// timestamps.
    pub fn diou_loss(&mut self, pred: Var, targets: Vec<RegTarget>) -> Result<Var> {
        let p = self.value(pred);
        if p.rows() != 2 {
            return dim_err(format!("diou_loss: prediction must have 2 rows, got {:?}", p.shape()));
        }
        if let Some(bad) = targets.iter().find(|r| r.t >= p.cols()) {
            return dim_err(format!("diou_loss: timestamp {} out of range", bad.t));
        }
        let total: f64 = targets
            .iter()
            .map(|r| diou_terms((p.at(0, r.t), p.at(1, r.t)), (r.start, r.end)).0)
            .sum();
        Ok(self.push(Tensor::scalar(total), Op::Diou { pred, targets }))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulated gradient of a leaf (input or parameter) node.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(&v)
    }

    /// Accumulated gradients of all parameters referenced by this graph.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(&id, v)| self.leaf_grads.get(v).map(|g| (id, g)))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Back-propagates from a single-element `loss` node, adding into the
    /// gradients of every reachable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input | Op::Param => {
                    match self.leaf_grads.get_mut(&Var(i)) {
                        Some(acc) => acc.axpy(1.0, &g)?,
                        None => {
                            self.leaf_grads.insert(Var(i), g);
                        }
                    }
                }
                op => {
                    for (v, gv) in self.local_grads(i, op, &g) {
                        accumulate(&mut grads, v, gv)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, op: &Op, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &self.nodes[i].value;
        match op {
            Op::Input | Op::Param => unreachable!(),
            Op::PointwiseConv { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (cin, t, cout) = (xv.rows(), xv.cols(), wv.rows());
                let mut gx = Tensor::zeros(xv.shape());
                let mut gw = Tensor::zeros(wv.shape());
                for o in 0..cout {
                    let grow = g.row(o);
                    for ci in 0..cin {
                        let xrow = xv.row(ci);
                        gw.data_mut()[o * cin + ci] = dot(grow, xrow);
                        let wv_ = wv.data()[o * cin + ci];
                        for (d, &gg) in gx.row_mut(ci).iter_mut().zip(grow) {
                            *d += wv_ * gg;
                        }
                    }
                }
                let _ = t;
                let mut out = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    out.push((*b, row_sums(g, val(*b).shape())));
                }
                out
            }
            Op::Conv1d { x, w, b, offsets } => {
                let (xv, wv) = (val(*x), val(*w));
                let (cin, k, cout) = (xv.rows(), offsets.len(), wv.shape()[0]);
                let mut gx = Tensor::zeros(xv.shape());
                let mut gw = Tensor::zeros(wv.shape());
                for o in 0..cout {
                    let grow = g.row(o);
                    for ci in 0..cin {
                        for (s, &off) in offsets.iter().enumerate() {
                            let widx = (o * cin + ci) * k + s;
                            gw.data_mut()[widx] = shifted_dot(grow, xv.row(ci), off);
                            add_shifted_back(gx.row_mut(ci), grow, off, wv.data()[widx]);
                        }
                    }
                }
                let mut out = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    out.push((*b, row_sums(g, val(*b).shape())));
                }
                out
            }
            Op::DepthwiseConv { x, w, b, offsets } => {
                let (xv, wv) = (val(*x), val(*w));
                let (c, k) = (xv.rows(), offsets.len());
                let mut gx = Tensor::zeros(xv.shape());
                let mut gw = Tensor::zeros(wv.shape());
                for ch in 0..c {
                    let grow = g.row(ch);
                    for (s, &off) in offsets.iter().enumerate() {
                        gw.data_mut()[ch * k + s] = shifted_dot(grow, xv.row(ch), off);
                        add_shifted_back(gx.row_mut(ch), grow, off, wv.data()[ch * k + s]);
                    }
                }
                let mut out = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    out.push((*b, row_sums(g, val(*b).shape())));
                }
                out
            }
            Op::Shift { x, offsets } => {
                let xv = val(*x);
                let c = xv.rows();
                let mut gx = Tensor::zeros(xv.shape());
                for (s, &off) in offsets.iter().enumerate() {
                    for ch in 0..c {
                        add_shifted_back(gx.row_mut(ch), g.row(s * c + ch), off, 1.0);
                    }
                }
                vec![(*x, gx)]
            }
            Op::GatherRows { x, index } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (r, &src) in index.iter().enumerate() {
                    for (d, &gg) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *d += gg;
                    }
                }
                vec![(*x, gx)]
            }
            Op::DepthwiseAggregate { stack, kernel, b } => {
                let (sv, kv) = (val(*stack), val(*kernel));
                let (c, k) = (kv.rows(), kv.cols());
                let mut gs = Tensor::zeros(sv.shape());
                let mut gk = Tensor::zeros(kv.shape());
                for ch in 0..c {
                    let grow = g.row(ch);
                    for s in 0..k {
                        let r = s * c + ch;
                        gk.data_mut()[ch * k + s] = dot(grow, sv.row(r));
                        let w = kv.data()[ch * k + s];
                        for (d, &gg) in gs.row_mut(r).iter_mut().zip(grow) {
                            *d = w * gg;
                        }
                    }
                }
                let mut out = vec![(*stack, gs), (*kernel, gk)];
                if let Some(b) = b {
                    out.push((*b, row_sums(g, val(*b).shape())));
                }
                out
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (&src, &gg) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += gg;
                }
                vec![(*x, gx)]
            }
            Op::Upsample { x } => {
                let xv = val(*x);
                let (c, t_in, t_out) = (xv.rows(), xv.cols(), g.cols());
                let taps = tensor::upsample_taps(t_in, t_out);
                let mut gx = Tensor::zeros(xv.shape());
                for ch in 0..c {
                    let grow = g.row(ch);
                    let dst = gx.row_mut(ch);
                    for (&(lo, hi, w), &gg) in taps.iter().zip(grow) {
                        dst[lo] += (1.0 - w) * gg;
                        dst[hi] += w * gg;
                    }
                }
                vec![(*x, gx)]
            }
            Op::Norm { x, gain, offset, group, whole_group, xhat, inv_std } => {
                let gv = val(*gain);
                let (c, t) = (xhat.rows(), xhat.cols());
                let mut ggain = Tensor::zeros(gv.shape());
                let mut goff = Tensor::zeros(val(*offset).shape());
                let mut gxhat = Tensor::zeros(xhat.shape());
                for r in 0..c {
                    ggain.data_mut()[r] = dot(g.row(r), xhat.row(r));
                    goff.data_mut()[r] = g.row(r).iter().sum();
                    let gr = gv.data()[r];
                    for (d, &gg) in gxhat.row_mut(r).iter_mut().zip(g.row(r)) {
                        *d = gr * gg;
                    }
                }
                let mut gx = Tensor::zeros(xhat.shape());
                if *whole_group {
                    let n = group * t;
                    for (gi, &is) in inv_std.iter().enumerate() {
                        let range = gi * n..(gi + 1) * n;
                        let gh = &gxhat.data()[range.clone()];
                        let xh = &xhat.data()[range.clone()];
                        let m1 = gh.iter().sum::<f64>() / n as f64;
                        let m2 = dot(gh, xh) / n as f64;
                        for ((d, &a), &b) in gx.data_mut()[range].iter_mut().zip(gh).zip(xh) {
                            *d = is * (a - m1 - b * m2);
                        }
                    }
                } else {
                    for (col, &is) in inv_std.iter().enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for r in 0..c {
                            let a = gxhat.data()[r * t + col];
                            m1 += a;
                            m2 += a * xhat.data()[r * t + col];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for r in 0..c {
                            let idx = r * t + col;
                            gx.data_mut()[idx] = is * (gxhat.data()[idx] - m1 - xhat.data()[idx] * m2);
                        }
                    }
                }
                vec![(*x, gx), (*gain, ggain), (*offset, goff)]
            }
            Op::Relu(x) => {
                let gx = zip(g, val(*x), |gg, xv| if xv > 0.0 { gg } else { 0.0 });
                vec![(*x, gx)]
            }
            Op::Sigmoid(x) => vec![(*x, zip(g, y, |gg, s| gg * s * (1.0 - s)))],
            Op::RestrictedTanh(x) => {
                let xv = val(*x);
                let gx = zip3(g, xv, y, |gg, xv, yv| if xv > 0.0 { gg * (1.0 - yv * yv) } else { 0.0 });
                vec![(*x, gx)]
            }
            Op::Softmax(x) => {
                let (r, t) = (y.rows(), y.cols());
                let mut gx = Tensor::zeros(y.shape());
                for col in 0..t {
                    let s: f64 = (0..r).map(|i| g.data()[i * t + col] * y.data()[i * t + col]).sum();
                    for i in 0..r {
                        let idx = i * t + col;
                        gx.data_mut()[idx] = y.data()[idx] * (g.data()[idx] - s);
                    }
                }
                vec![(*x, gx)]
            }
            Op::ChannelMean(x) => {
                let xv = val(*x);
                let c = xv.rows() as f64;
                let mut gx = Tensor::zeros(xv.shape());
                for r in 0..xv.rows() {
                    for (d, &gg) in gx.row_mut(r).iter_mut().zip(g.row(0)) {
                        *d = gg / c;
                    }
                }
                vec![(*x, gx)]
            }
            Op::TapNormalize { x, eps } => {
                let xv = val(*x);
                let (k, t) = (xv.rows(), xv.cols());
                let mut gx = Tensor::zeros(xv.shape());
                for col in 0..t {
                    let z: f64 = (0..k).map(|s| xv.data()[s * t + col]).sum::<f64>() + eps;
                    let ga: f64 = (0..k).map(|s| g.data()[s * t + col] * y.data()[s * t + col]).sum();
                    for s in 0..k {
                        gx.data_mut()[s * t + col] = (g.data()[s * t + col] - ga) / z;
                    }
                }
                vec![(*x, gx)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                vec![(*a, zip(g, bv, |gg, q| gg * q)), (*b, zip(g, av, |gg, p| gg * p))]
            }
            Op::ScaleBy { x, s } => {
                let (xv, sv) = (val(*x), val(*s));
                let gs = Tensor::full(sv.shape(), dot(g.data(), xv.data()));
                vec![(*x, g.scale(sv.item())), (*s, gs)]
            }
            Op::ScaleConst { x, c } => vec![(*x, g.scale(*c))],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Focal { probs, targets, alpha, gamma } => {
                let pv = val(*probs);
                let gg = g.item();
                let gp = zip(pv, targets, |p, yv| gg * focal_terms(p, yv, *alpha, *gamma).1);
                vec![(*probs, gp)]
            }
            Op::Diou { pred, targets } => {
                let pv = val(*pred);
                let gg = g.item();
                let mut gp = Tensor::zeros(pv.shape());
                let t = pv.cols();
                for r in targets {
                    let (_, ds, de) = diou_terms((pv.at(0, r.t), pv.at(1, r.t)), (r.start, r.end));
                    gp.data_mut()[r.t] += gg * ds;
                    gp.data_mut()[t + r.t] += gg * de;
                }
                vec![(*pred, gp)]
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Σ_t g[t]·x[t + off]` over the valid range.
fn shifted_dot(g: &[f64], x: &[f64], off: isize) -> f64 {
    let t = g.len() as isize;
    let lo = (-off).max(0);
    let hi = (t - off).min(t);
    if lo >= hi {
        return 0.0;
    }
    let (lo, hi) = (lo as usize, hi as usize);
    let so = (lo as isize + off) as usize;
    dot(&g[lo..hi], &x[so..so + (hi - lo)])
}

/// Adjoint of `dst[t] += w·src[t + off]`: `gsrc[t + off] += w·g[t]`.
fn add_shifted_back(gsrc: &mut [f64], g: &[f64], off: isize, w: f64) {
    if w == 0.0 {
        return;
    }
    let t = g.len() as isize;
    let lo = (-off).max(0);
    let hi = (t - off).min(t);
    if lo >= hi {
        return;
    }
    let (lo, hi) = (lo as usize, hi as usize);
    let so = (lo as isize + off) as usize;
    for (d, &gg) in gsrc[so..so + (hi - lo)].iter_mut().zip(&g[lo..hi]) {
        *d += w * gg;
    }
}

fn row_sums(g: &Tensor, shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(shape);
    for r in 0..g.rows() {
        out.data_mut()[r] = g.row(r).iter().sum();
    }
    out
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.zip_map(b, f).expect("backward shapes are consistent")
}

fn zip3(a: &Tensor, b: &Tensor, c: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("backward shapes are consistent")
}

/// Focal loss of one probability against a target in `[0, 1]` and its
/// derivative with respect to the probability. Targets interpolate between
/// the positive and negative forms.
pub fn focal_terms(p: f64, y: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let mut loss = 0.0;
    let mut dp = 0.0;
    if y > 0.0 {
        let q = 1.0 - p;
        let lp = p.max(LOG_CLAMP).ln();
        let dlp = if p > LOG_CLAMP { 1.0 / p } else { 0.0 };
        let qg = q.powf(gamma);
        let dqg = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
        loss += y * (-alpha * qg * lp);
        // d/dp of -α q^γ log p, with dq/dp = -1
        dp += y * (-alpha) * (-dqg * lp + qg * dlp);
    }
    if y < 1.0 {
        let q = 1.0 - p;
        let lq = q.max(LOG_CLAMP).ln();
        let dlq = if q > LOG_CLAMP { -1.0 / q } else { 0.0 };
        let pg = p.powf(gamma);
        let dpg = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
        loss += (1.0 - y) * (-(1.0 - alpha) * pg * lq);
        dp += (1.0 - y) * (-(1.0 - alpha)) * (dpg * lq + pg * dlq);
    }
    (loss, dp)
}

/// DIoU loss between two offset pairs `(d_start, d_end)` measured from a
/// shared anchor, with its gradient with respect to the predicted pair.
pub fn diou_terms(pred: (f64, f64), target: (f64, f64)) -> (f64, f64, f64) {
    let (ps, pe) = pred;
    let (ts, te) = target;
    let (min_e, de_min) = if pe < te { (pe, 1.0) } else { (te, 0.0) };
    let (min_s, ds_min) = if ps < ts { (ps, 1.0) } else { (ts, 0.0) };
    let raw_inter = min_e + min_s;
    let (inter, di_s, di_e) = if raw_inter > 0.0 {
        (raw_inter, ds_min, de_min)
    } else {
        (0.0, 0.0, 0.0)
    };
    let union = ps + pe + ts + te - inter;
    let (iou, diou_s, diou_e) = if union > 0.0 {
        let u2 = union * union;
        (
            inter / union,
            (di_s * union - inter * (1.0 - di_s)) / u2,
            (di_e * union - inter * (1.0 - di_e)) / u2,
        )
    } else {
        (0.0, 0.0, 0.0)
    };
    let (max_e, de_max) = if pe > te { (pe, 1.0) } else { (te, 0.0) };
    let (max_s, ds_max) = if ps > ts { (ps, 1.0) } else { (ts, 0.0) };
    let enclosing = max_e + max_s;
    // center offset from the anchor: ((end) + (-start)) / 2
    let rho = ((pe - ps) - (te - ts)) / 2.0;
    let (penalty, dp_s, dp_e) = if enclosing > 0.0 {
        let e2 = enclosing * enclosing;
        let e3 = e2 * enclosing;
        (
            rho * rho / e2,
            2.0 * rho * (-0.5) / e2 - 2.0 * rho * rho * ds_max / e3,
            2.0 * rho * 0.5 / e2 - 2.0 * rho * rho * de_max / e3,
        )
    } else {
        (0.0, 0.0, 0.0)
    };
    (1.0 - iou + penalty, -diou_s + dp_s, -diou_e + dp_e)
}
