//! Dense row-major tensors and the forward kernels every layer is built from.
//!
//! Almost everything in this crate is a rank-2 `channels × time` array, so the
//! kernels below assume that layout: row `c` holds channel `c`, and the time
//! axis is contiguous. Scalars are stored with shape `[1]`.
//!
//! The kernels here are pure functions. Their reverse-mode counterparts live
//! in [`crate::graph`], which records calls to these kernels and knows how to
//! push gradients back through them.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};

/// Epsilon used by every normalization layer.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return dim_err(format!("zero-sized dimension in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a `rows × cols` matrix from nested slices.
    ///
    /// Panics if the rows are ragged or empty; meant for literals in tests
    /// and fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        assert!(!rows.is_empty(), "from_rows: no rows");
        let cols = rows[0].as_ref().len();
        assert!(cols > 0, "from_rows: empty row");
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "from_rows: ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a rank-2 tensor (1 for a scalar or vector).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Number of columns (time steps) of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            _ => self.data.len(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let t = self.cols();
        &self.data[r * t..(r + 1) * t]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let t = self.cols();
        &mut self.data[r * t..(r + 1) * t]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Column slice `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.cols() {
            return dim_err(format!(
                "column range {start}..{end} invalid for {} columns",
                self.cols()
            ));
        }
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Self::matrix(rows, end - start, data)
    }

    fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(())
    }

    fn expect_rank2(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return dim_err(format!("{what}: expected rank-2, got {:?}", self.shape));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Temporal offsets of a `k`-tap kernel with zero-centered taps: `s - k/2`.
pub fn centered_offsets(k: usize) -> Vec<isize> {
    let half = (k / 2) as isize;
    (0..k as isize).map(|s| s - half).collect()
}

pub(crate) fn check_odd(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return config_err(format!("kernel size must be odd and positive, got {k}"));
    }
    Ok(())
}

/// `out[c,t] = Σ_i weight[c,i]·x[i,t] (+ bias[c])`.
pub fn pointwise_conv(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (cin, t) = x.expect_rank2("pointwise_conv input")?;
    let (cout, wcin) = weight.expect_rank2("pointwise_conv weight")?;
    if wcin != cin {
        return dim_err(format!(
            "pointwise_conv: weight expects {wcin} input channels, input has {cin}"
        ));
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return dim_err(format!("pointwise_conv: bias len {} != {cout}", b.len()));
        }
    }
    let mut out = Tensor::zeros(&[cout, t]);
    for o in 0..cout {
        let orow = &mut out.data[o * t..(o + 1) * t];
        if let Some(b) = bias {
            orow.fill(b.data[o]);
        }
        for i in 0..cin {
            let w = weight.data[o * cin + i];
            if w == 0.0 {
                continue;
            }
            for (y, &v) in orow.iter_mut().zip(&x.data[i * t..(i + 1) * t]) {
                *y += w * v;
            }
        }
    }
    Ok(out)
}

/// Dense temporal convolution with zero padding.
///
/// `weight` has shape `[C_out, C_in, k]` and tap `s` reads input time
/// `t + offsets[s]`.
pub fn conv1d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    offsets: &[isize],
) -> Result<Tensor> {
    let (cin, t) = x.expect_rank2("conv1d input")?;
    let k = offsets.len();
    if weight.shape.len() != 3 || weight.shape[1] != cin || weight.shape[2] != k {
        return dim_err(format!(
            "conv1d: weight shape {:?} incompatible with C_in={cin}, k={k}",
            weight.shape
        ));
    }
    let cout = weight.shape[0];
    if let Some(b) = bias {
        if b.len() != cout {
            return dim_err(format!("conv1d: bias len {} != {cout}", b.len()));
        }
    }
    let mut out = Tensor::zeros(&[cout, t]);
    for o in 0..cout {
        let orow = &mut out.data[o * t..(o + 1) * t];
        if let Some(b) = bias {
            orow.fill(b.data[o]);
        }
        for i in 0..cin {
            let xrow = &x.data[i * t..(i + 1) * t];
            for (s, &off) in offsets.iter().enumerate() {
                let w = weight.data[(o * cin + i) * k + s];
                add_shifted(orow, xrow, off, w);
            }
        }
    }
    Ok(out)
}

/// `dst[t] += w * src[t + off]` over the valid range.
#[inline]
fn add_shifted(dst: &mut [f64], src: &[f64], off: isize, w: f64) {
    let t = dst.len() as isize;
    let lo = (-off).max(0);
    let hi = (t - off).min(t);
    if lo >= hi {
        return;
    }
    let (lo, hi) = (lo as usize, hi as usize);
    let so = (lo as isize + off) as usize;
    for (d, &v) in dst[lo..hi].iter_mut().zip(&src[so..so + (hi - lo)]) {
        *d += w * v;
    }
}

/// Per-channel temporal convolution; `weight` is `[C, k]`.
pub fn depthwise_conv1d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    offsets: &[isize],
) -> Result<Tensor> {
    let (c, t) = x.expect_rank2("depthwise_conv1d input")?;
    let k = offsets.len();
    if weight.shape != [c, k] {
        return dim_err(format!(
            "depthwise_conv1d: weight {:?} != [{c}, {k}]",
            weight.shape
        ));
    }
    if let Some(b) = bias {
        if b.len() != c {
            return dim_err(format!("depthwise_conv1d: bias len {} != {c}", b.len()));
        }
    }
    let mut out = Tensor::zeros(&[c, t]);
    for ch in 0..c {
        let orow = &mut out.data[ch * t..(ch + 1) * t];
        if let Some(b) = bias {
            orow.fill(b.data[ch]);
        }
        let xrow = &x.data[ch * t..(ch + 1) * t];
        for (s, &off) in offsets.iter().enumerate() {
            add_shifted(orow, xrow, off, weight.data[ch * k + s]);
        }
    }
    Ok(out)
}

/// Depthwise convolution with the standard centered kernel of odd size `k`.
pub fn depthwise_conv1d_same(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let k = weight.cols();
    check_odd(k)?;
    depthwise_conv1d(x, weight, None, &centered_offsets(k))
}

/// Stacks shifted copies of `x`: block `s` (rows `s·C .. (s+1)·C`) holds
/// `x[:, t + offsets[s]]`, zero outside `[0, T)`.
pub fn shift(x: &Tensor, offsets: &[isize]) -> Result<Tensor> {
    let (c, t) = x.expect_rank2("shift input")?;
    if offsets.is_empty() {
        return config_err("shift: no offsets");
    }
    let k = offsets.len();
    let mut out = Tensor::zeros(&[k * c, t]);
    for (s, &off) in offsets.iter().enumerate() {
        for ch in 0..c {
            let dst = &mut out.data[(s * c + ch) * t..(s * c + ch + 1) * t];
            add_shifted(dst, &x.data[ch * t..(ch + 1) * t], off, 1.0);
        }
    }
    Ok(out)
}

/// Row gather: `out[r, :] = x[index[r], :]`.
pub fn gather_rows(x: &Tensor, index: &[usize]) -> Result<Tensor> {
    let (rows, t) = x.expect_rank2("gather_rows input")?;
    if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
        return dim_err(format!("gather_rows: index {bad} out of {rows} rows"));
    }
    if index.is_empty() {
        return dim_err("gather_rows: empty index");
    }
    let mut data = Vec::with_capacity(index.len() * t);
    for &i in index {
        data.extend_from_slice(x.row(i));
    }
    Tensor::matrix(index.len(), t, data)
}

/// `y[c,t] = Σ_s K[c,s]·stack[s·C + c, t] (+ bias[c])`: the depthwise form of
/// pointwise aggregation over a shifted stack.
pub fn depthwise_aggregate(stack: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (kc, t) = stack.expect_rank2("depthwise_aggregate stack")?;
    let (c, k) = kernel.expect_rank2("depthwise_aggregate kernel")?;
    if k * c != kc {
        return dim_err(format!(
            "depthwise_aggregate: stack has {kc} rows, kernel is {c}x{k}"
        ));
    }
    if let Some(b) = bias {
        if b.len() != c {
            return dim_err(format!("depthwise_aggregate: bias len {} != {c}", b.len()));
        }
    }
    let mut out = Tensor::zeros(&[c, t]);
    for ch in 0..c {
        let orow = &mut out.data[ch * t..(ch + 1) * t];
        if let Some(b) = bias {
            orow.fill(b.data[ch]);
        }
        for s in 0..k {
            let w = kernel.data[ch * k + s];
            let srow = &stack.data[(s * c + ch) * t..(s * c + ch + 1) * t];
            for (y, &v) in orow.iter_mut().zip(srow) {
                *y += w * v;
            }
        }
    }
    Ok(out)
}

/// Max-pool with window and stride 2. A trailing odd element passes through.
///
/// Also returns, per output element, the flat input index it was taken from.
pub fn max_pool_ds2_with_argmax(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, t) = x.expect_rank2("max_pool_ds2 input")?;
    let to = t.div_ceil(2);
    let mut out = Tensor::zeros(&[c, to]);
    let mut arg = Vec::with_capacity(c * to);
    for ch in 0..c {
        for j in 0..to {
            let a = ch * t + 2 * j;
            let idx = if 2 * j + 1 < t && x.data[a + 1] > x.data[a] {
                a + 1
            } else {
                a
            };
            out.data[ch * to + j] = x.data[idx];
            arg.push(idx);
        }
    }
    Ok((out, arg))
}

pub fn max_pool_ds2(x: &Tensor) -> Result<Tensor> {
    Ok(max_pool_ds2_with_argmax(x)?.0)
}

/// Interpolation taps `(lo, hi, w_hi)` for resampling `t_in` samples to
/// `t_out` with half-pixel alignment: output `j` samples input position
/// `(j + 0.5)·t_in/t_out − 0.5`, clamped to the valid range.
pub(crate) fn upsample_taps(t_in: usize, t_out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = t_in as f64 / t_out as f64;
    (0..t_out)
        .map(|j| {
            let src = ((j as f64 + 0.5) * ratio - 0.5).clamp(0.0, (t_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(t_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Linear ×2 temporal upsampling to `target_t ∈ {2T−1, 2T}`.
pub fn linear_upsample_x2(x: &Tensor, target_t: usize) -> Result<Tensor> {
    let (c, t) = x.expect_rank2("linear_upsample_x2 input")?;
    if target_t != 2 * t && target_t + 1 != 2 * t {
        return dim_err(format!(
            "linear_upsample_x2: target length {target_t} not in {{{}, {}}}",
            2 * t - 1,
            2 * t
        ));
    }
    let taps = upsample_taps(t, target_t);
    let mut out = Tensor::zeros(&[c, target_t]);
    for ch in 0..c {
        let xrow = &x.data[ch * t..(ch + 1) * t];
        for (j, &(lo, hi, w)) in taps.iter().enumerate() {
            out.data[ch * target_t + j] = (1.0 - w) * xrow[lo] + w * xrow[hi];
        }
    }
    Ok(out)
}

/// Per-timestamp normalization across channels, then per-channel affine.
pub fn layer_norm(x: &Tensor, gain: &Tensor, offset: &Tensor) -> Result<Tensor> {
    let (c, _) = x.expect_rank2("layer_norm input")?;
    group_norm_impl(x, c, gain, offset, false)
}

/// Group normalization: each group of `C/groups` channels is normalized over
/// all of its channels and timestamps.
pub fn group_norm(x: &Tensor, groups: usize, gain: &Tensor, offset: &Tensor) -> Result<Tensor> {
    let (c, _) = x.expect_rank2("group_norm input")?;
    if groups == 0 || c % groups != 0 {
        return config_err(format!("group_norm: {c} channels not divisible by {groups} groups"));
    }
    group_norm_impl(x, c / groups, gain, offset, true)
}

/// Normalized values (before affine) and per-unit inverse std.
pub(crate) struct NormStats {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Shared normalization core. `whole_group == false` normalizes each column
/// over all channels (layer norm); otherwise each group of `group` channels is
/// normalized over channels × time.
pub(crate) fn norm_stats(x: &Tensor, group: usize, whole_group: bool) -> NormStats {
    let (c, t) = (x.rows(), x.cols());
    let mut xhat = Tensor::zeros(&[c, t]);
    let mut inv_std = Vec::new();
    if whole_group {
        for g in 0..c / group {
            let block = &x.data[g * group * t..(g + 1) * group * t];
            let n = block.len() as f64;
            let mean = block.iter().sum::<f64>() / n;
            let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            for (o, &v) in xhat.data[g * group * t..(g + 1) * group * t]
                .iter_mut()
                .zip(block)
            {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
    } else {
        for col in 0..t {
            let mean = (0..c).map(|r| x.data[r * t + col]).sum::<f64>() / c as f64;
            let var = (0..c)
                .map(|r| {
                    let d = x.data[r * t + col] - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            for r in 0..c {
                xhat.data[r * t + col] = (x.data[r * t + col] - mean) * is;
            }
            inv_std.push(is);
        }
    }
    NormStats { xhat, inv_std }
}

fn group_norm_impl(
    x: &Tensor,
    group: usize,
    gain: &Tensor,
    offset: &Tensor,
    whole_group: bool,
) -> Result<Tensor> {
    let c = x.rows();
    if gain.len() != c || offset.len() != c {
        return dim_err(format!(
            "normalization affine params have lengths {}/{}, expected {c}",
            gain.len(),
            offset.len()
        ));
    }
    let mut out = norm_stats(x, group, whole_group).xhat;
    apply_affine(&mut out, gain, offset);
    Ok(out)
}

pub(crate) fn apply_affine(x: &mut Tensor, gain: &Tensor, offset: &Tensor) {
    let t = x.cols();
    for r in 0..x.rows() {
        let (g, b) = (gain.data[r], offset.data[r]);
        for v in &mut x.data[r * t..(r + 1) * t] {
            *v = g * *v + b;
        }
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// `max(0, tanh(x))`: a gate with range `[0, 1)` that is exactly zero for
/// non-positive inputs.
pub fn restricted_tanh(x: &Tensor) -> Tensor {
    x.map(|v| v.tanh().max(0.0))
}

/// Softmax down each column (over rows).
pub fn softmax_axis0(x: &Tensor) -> Result<Tensor> {
    let (r, t) = x.expect_rank2("softmax input")?;
    let mut out = x.clone();
    for col in 0..t {
        let m = (0..r).map(|i| x.data[i * t + col]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for i in 0..r {
            let e = (x.data[i * t + col] - m).exp();
            out.data[i * t + col] = e;
            z += e;
        }
        for i in 0..r {
            out.data[i * t + col] /= z;
        }
    }
    Ok(out)
}

/// Channel average: `[C × T] → [1 × T]`.
pub fn channel_mean(x: &Tensor) -> Result<Tensor> {
    let (c, t) = x.expect_rank2("channel_mean input")?;
    let mut out = vec![0.0; t];
    for r in 0..c {
        for (o, &v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    Tensor::matrix(1, t, out)
}

/// Column-wise ε-guarded sum normalization: `A[s,t] = G[s,t] / (Σ_s' G[s',t] + ε)`.
pub fn tap_normalize(gates: &Tensor, eps: f64) -> Result<Tensor> {
    let (k, t) = gates.expect_rank2("tap_normalize input")?;
    let mut out = gates.clone();
    for col in 0..t {
        let z: f64 = (0..k).map(|s| gates.data[s * t + col]).sum::<f64>() + eps;
        for s in 0..k {
            out.data[s * t + col] /= z;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_identity_and_sum() {
        let x = Tensor::from_rows(&[[1.0, -2.0, 3.5], [0.25, 4.0, -1.0]]);
        let y = pointwise_conv(&x, &Tensor::identity(2), None).unwrap();
        assert_eq!(y, x);

        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let w = Tensor::from_rows(&[[1.0, 1.0]]);
        let y = pointwise_conv(&x, &w, None).unwrap();
        assert_eq!(y, Tensor::from_rows(&[[4.0, 6.0]]));
    }

    #[test]
    fn pointwise_bias_only() {
        let x = Tensor::from_rows(&[[7.0, 8.0, 9.0]]);
        let y = pointwise_conv(&x, &Tensor::zeros(&[1, 1]), Some(&Tensor::scalar(5.0))).unwrap();
        assert_eq!(y, Tensor::from_rows(&[[5.0, 5.0, 5.0]]));
    }

    #[test]
    fn pointwise_shape_mismatch() {
        let x = Tensor::zeros(&[3, 4]);
        let err = pointwise_conv(&x, &Tensor::zeros(&[2, 2]), None).unwrap_err();
        assert!(matches!(err, crate::Error::Dimension(_)));
    }

    #[test]
    fn depthwise_examples() {
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0, 4.0]]);
        let y = depthwise_conv1d_same(&x, &Tensor::from_rows(&[[1.0, 1.0, 1.0]])).unwrap();
        assert_eq!(y, Tensor::from_rows(&[[3.0, 6.0, 9.0, 7.0]]));

        let y = depthwise_conv1d_same(&x, &Tensor::from_rows(&[[1.0]])).unwrap();
        assert_eq!(y, x);

        let z = Tensor::zeros(&[2, 5]);
        let y = depthwise_conv1d_same(&z, &Tensor::full(&[2, 3], 0.7)).unwrap();
        assert_eq!(y, z);
    }

    #[test]
    fn depthwise_even_kernel_rejected() {
        let x = Tensor::zeros(&[1, 4]);
        let err = depthwise_conv1d_same(&x, &Tensor::zeros(&[1, 2])).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    #[test]
    fn max_pool_examples() {
        let x = Tensor::from_rows(&[[1.0, 3.0, 2.0, 0.0]]);
        assert_eq!(max_pool_ds2(&x).unwrap(), Tensor::from_rows(&[[3.0, 2.0]]));

        let c = Tensor::full(&[2, 7], 1.5);
        assert_eq!(max_pool_ds2(&c).unwrap(), Tensor::full(&[2, 4], 1.5));

        let one = Tensor::from_rows(&[[4.0]]);
        assert_eq!(max_pool_ds2(&one).unwrap(), one);

        // odd tail passes through
        let x = Tensor::from_rows(&[[1.0, 0.0, -5.0]]);
        assert_eq!(max_pool_ds2(&x).unwrap(), Tensor::from_rows(&[[1.0, -5.0]]));
    }

    #[test]
    fn upsample_examples() {
        let x = Tensor::from_rows(&[[0.0, 2.0]]);
        // positions -0.25→0, 0.25, 0.75, 1.25→1
        let y = linear_upsample_x2(&x, 4).unwrap();
        assert_eq!(y, Tensor::from_rows(&[[0.0, 0.5, 1.5, 2.0]]));

        let y = linear_upsample_x2(&x, 3).unwrap();
        // ratio 2/3: positions -1/6→0, 0.5, 7/6→1
        assert_eq!(y, Tensor::from_rows(&[[0.0, 1.0, 2.0]]));

        let one = Tensor::from_rows(&[[3.0]]);
        assert_eq!(linear_upsample_x2(&one, 2).unwrap(), Tensor::from_rows(&[[3.0, 3.0]]));
        assert_eq!(linear_upsample_x2(&one, 1).unwrap(), one);

        let c = Tensor::full(&[3, 5], -2.0);
        assert_eq!(linear_upsample_x2(&c, 9).unwrap(), Tensor::full(&[3, 9], -2.0));
        assert!(linear_upsample_x2(&c, 8).is_err());
        assert!(linear_upsample_x2(&c, 11).is_err());
    }

    #[test]
    fn pool_then_upsample_constant_roundtrip() {
        for t in 1..12 {
            let c = Tensor::full(&[2, t], 0.3);
            let p = max_pool_ds2(&c).unwrap();
            assert_eq!(linear_upsample_x2(&p, t).unwrap(), c);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor::from_rows(&[[1.0], [3.0]]);
        let y = layer_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2])).unwrap();
        let expected = 1.0 / (1.0 + NORM_EPS).sqrt();
        assert!((y.at(0, 0) + expected).abs() < 1e-12);
        assert!((y.at(1, 0) - expected).abs() < 1e-12);

        let same = Tensor::from_rows(&[[2.0, 1.0], [2.0, 1.0], [2.0, 1.0]]);
        let y = layer_norm(&same, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let xhat = Tensor::from_rows(&[[0.5, -1.0]]);
        let mut affine = xhat.clone();
        apply_affine(&mut affine, &Tensor::scalar(2.0), &Tensor::scalar(1.0));
        assert_eq!(affine, Tensor::from_rows(&[[2.0, -1.0]]));
    }

    #[test]
    fn group_norm_rejects_bad_groups() {
        let x = Tensor::zeros(&[6, 3]);
        let g = Tensor::full(&[6], 1.0);
        let b = Tensor::zeros(&[6]);
        assert!(matches!(group_norm(&x, 4, &g, &b), Err(crate::Error::Config(_))));
        assert!(group_norm(&x, 3, &g, &b).is_ok());
    }

    #[test]
    fn group_norm_single_group_matches_whole_tensor_standardization() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 6.0]]);
        let y = group_norm(&x, 1, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2])).unwrap();
        let mean = 3.0;
        let var = (4.0 + 1.0 + 0.0 + 9.0) / 4.0;
        for (o, v) in y.data().iter().zip(x.data()) {
            assert!((o - (v - mean) / (var + NORM_EPS).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn activation_examples() {
        let x = Tensor::from_rows(&[[-1.0, 2.0, -5.0]]);
        assert_eq!(relu(&x), Tensor::from_rows(&[[0.0, 2.0, 0.0]]));
        assert_eq!(restricted_tanh(&x).at(0, 2), 0.0);
        assert!((restricted_tanh(&x).at(0, 1) - 2f64.tanh()).abs() < 1e-15);
        assert!((sigmoid_scalar(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid_scalar(-800.0).is_finite());

        let s = softmax_axis0(&Tensor::full(&[4, 2], 3.0)).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn tap_normalize_zero_column_stays_zero() {
        let g = Tensor::from_rows(&[[0.0, 1.0], [0.0, 3.0]]);
        let a = tap_normalize(&g, 1e-8).unwrap();
        assert_eq!(a.at(0, 0), 0.0);
        assert_eq!(a.at(1, 0), 0.0);
        assert!((a.at(0, 1) + a.at(1, 1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shift_and_gather() {
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0, 4.0]]);
        let s = shift(&x, &centered_offsets(3)).unwrap();
        assert_eq!(
            s,
            Tensor::from_rows(&[[0.0, 1.0, 2.0, 3.0], [1.0, 2.0, 3.0, 4.0], [2.0, 3.0, 4.0, 0.0]])
        );
        let g = gather_rows(&s, &[2, 2, 0]).unwrap();
        assert_eq!(g.row(1), &[2.0, 3.0, 4.0, 0.0]);
        assert!(gather_rows(&s, &[3]).is_err());
    }

    #[test]
    fn tensor_construction_checks() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert_eq!(Tensor::scalar(2.0).item(), 2.0);
    }
}
