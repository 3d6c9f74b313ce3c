//! Training loop, optimizer, checkpoints, inference and diagnostics.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::Video;
use crate::detection::{loss_terms, normalized_loss, Detection, LossOutput, Segment};
use crate::error::{config_err, Error, Result};
use crate::evaluation::{mean_off_diagonal, similarity_matrix};
use crate::graph::Graph;
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub max_input_length: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            warmup_epochs: 30,
            learning_rate: 1e-3,
            weight_decay: 0.025,
            clip_norm: 1.0,
            ema_decay: 0.999,
            batch_size: 4,
            max_input_length: 2304,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.max_input_length == 0 {
            return config_err("epochs, batch size and max input length must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return config_err(format!(
                "warmup ({}) must be shorter than training ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return config_err("learning rate and clip norm must be positive, weight decay >= 0");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return config_err("ema decay must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Model and training settings read from one JSON file. Missing fields take
/// their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Linear warmup to `base` over `warmup` steps, then cosine decay reaching 0
/// at the last of `total` steps. `step` is 0-based.
pub fn learning_rate(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = ((step + 1 - warmup) as f64 / span).min(1.0);
    0.5 * base * (1.0 + (PI * progress).cos())
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Applies one update; `grads` is indexed like the store. Weight decay
    /// only touches parameters flagged for it.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64, weight_decay: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.0;
            let decay = store.param(id).decay;
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                if decay {
                    p[j] *= 1.0 - lr * weight_decay;
                }
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// `ema ← decay·ema + (1 − decay)·params`.
pub fn ema_update(ema: &mut ParamStore, params: &ParamStore, decay: f64) {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let src = params.get(id).data();
        for (e, &p) in ema.get_mut(id).data_mut().iter_mut().zip(src) {
            *e = decay * *e + (1.0 - decay) * p;
        }
    }
}

/// Cuts a random window of at most `max_len` steps. Ground truth (grid
/// units) is shifted into the window and clipped; instances left empty are
/// dropped.
pub fn random_crop<R: Rng>(video: &Video, max_len: usize, rng: &mut R) -> Result<(Tensor, Vec<Segment>)> {
    let t = video.len();
    let gt = video.grid_segments();
    if t <= max_len {
        return Ok((video.features.clone(), gt));
    }
    let offset = rng.gen_range(0..=t - max_len);
    let features = video.features.slice_cols(offset, offset + max_len)?;
    let (lo, hi) = (offset as f64, (offset + max_len) as f64);
    let segments = gt
        .into_iter()
        .filter_map(|s| {
            let (a, b) = (s.start.max(lo), s.end.min(hi));
            (b > a).then(|| Segment::new(a - lo, b - lo, s.label))
        })
        .collect();
    Ok((features, segments))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
    /// Mean over batches.
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: Model,
    pub params: ParamStore,
    pub ema: ParamStore,
    pub train: TrainConfig,
    pub log: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Full-sequence detections using the averaged parameters.
    pub fn infer(&self, videos: &[Video]) -> Result<Vec<Detection>> {
        infer(&self.model, &self.ema, videos)
    }
}

pub fn infer(model: &Model, store: &ParamStore, videos: &[Video]) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for v in videos {
        out.extend(model.detect(store, &v.id, &v.features, v.feature_stride_s, v.duration_s)?);
    }
    Ok(out)
}

/// One optimization step on a batch: forward and backward per video with the
/// loss normalized by the batch's positive count, then summed gradients.
fn batch_gradients(
    model: &Model,
    store: &ParamStore,
    batch: &[(String, Tensor, Vec<Segment>)],
) -> Result<(Vec<Tensor>, LossOutput, Vec<LossOutput>)> {
    let targets = batch
        .iter()
        .map(|(_, f, gt)| model.assign(gt, f.cols()))
        .collect::<Result<Vec<_>>>()?;
    let num_positive: usize = targets.iter().map(|t| t.num_positive()).sum();

    let mut grads: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
    let mut summary = LossOutput { total: 0.0, cls: 0.0, reg: 0.0, num_positive };
    let mut per_video = Vec::with_capacity(batch.len());
    for ((_, features, _), tgt) in batch.iter().zip(&targets) {
        let mut g = Graph::new();
        let x = g.input(features.clone());
        let fwd = model.forward(&mut g, store, x)?;
        let terms = loss_terms(&mut g, &fwd.outputs, tgt, &model.config.loss)?;
        let (loss, out) = normalized_loss(&mut g, &[terms], num_positive, &model.config.loss)?;
        summary.total += out.total;
        summary.cls += out.cls;
        summary.reg += out.reg;
        per_video.push(out);
        if !out.total.is_finite() {
            continue;
        }
        g.backward(loss)?;
        for (id, grad) in g.param_grads() {
            grads[id.0].axpy(1.0, grad)?;
        }
    }
    Ok((grads, summary, per_video))
}

/// Trains from scratch. `on_epoch` observes each epoch's log line.
pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    videos: &[Video],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Checkpoint> {
    config.validate()?;
    if videos.is_empty() {
        return config_err("no training videos");
    }
    let (model, mut params) = Model::new(model_config, config.seed)?;
    let mut ema = params.clone();
    let mut opt = AdamW::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

    let steps_per_epoch = videos.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let warmup = steps_per_epoch * config.warmup_epochs;
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let (f, gt) = random_crop(&videos[i], config.max_input_length, &mut rng)?;
                    Ok((videos[i].id.clone(), f, gt))
                })
                .collect::<Result<Vec<_>>>()?;
            let (mut grads, out, per_video) = batch_gradients(&model, &params, &batch)?;
            if !out.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: b,
                    videos: batch.iter().map(|(id, _, _)| id.clone()).collect(),
                    dump: failure_dump(&batch, &per_video, &params),
                });
            }
            let norm = clip_grad_norm(&mut grads, config.clip_norm);
            lr = learning_rate(config.learning_rate, step, warmup, total);
            opt.update(&mut params, &grads, lr, config.weight_decay);
            ema_update(&mut ema, &params, config.ema_decay);
            step += 1;
            sums.0 += out.total;
            sums.1 += out.cls;
            sums.2 += out.reg;
            sums.3 += norm;
        }
        let n = steps_per_epoch as f64;
        let entry = EpochLog {
            epoch,
            lr,
            loss: sums.0 / n,
            cls: sums.1 / n,
            reg: sums.2 / n,
            grad_norm: sums.3 / n,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(Checkpoint { model, params, ema, train: config.clone(), log })
}

fn failure_dump(batch: &[(String, Tensor, Vec<Segment>)], losses: &[LossOutput], params: &ParamStore) -> serde_json::Value {
    let non_finite: Vec<&str> = params
        .iter()
        .filter(|(_, p)| !p.value.is_finite())
        .map(|(_, p)| p.name.as_str())
        .collect();
    json!({
        "videos": batch.iter().zip(losses).map(|((id, f, gt), l)| json!({
            "video_id": id,
            "length": f.cols(),
            "features_finite": f.is_finite(),
            "ground_truth": gt,
            "loss": l,
        })).collect::<Vec<_>>(),
        "non_finite_params": non_finite,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSimilarity {
    pub level: usize,
    pub stride: usize,
    pub mean_off_diagonal: f64,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    pub name: String,
    /// `[rows × T]` values.
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub video_id: String,
    pub gates: Vec<GateTrace>,
    pub similarity: Vec<LevelSimilarity>,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Gate and mask values of every DFA operator, and the cosine-similarity
/// matrices of the encoder pyramid, for one video.
pub fn diagnostics(model: &Model, store: &ParamStore, video: &Video) -> Result<Diagnostics> {
    let mut g = Graph::with_tracing();
    let x = g.input(video.features.clone());
    let fwd = model.forward(&mut g, store, x)?;
    let gates = g
        .tags()
        .map(|(name, t)| GateTrace { name: name.to_string(), values: rows(t) })
        .collect();
    let similarity = fwd
        .pyramid
        .iter()
        .enumerate()
        .map(|(level, l)| {
            let s = similarity_matrix(g.value(l.var));
            LevelSimilarity {
                level,
                stride: l.stride,
                mean_off_diagonal: mean_off_diagonal(&s),
                matrix: rows(&s),
            }
        })
        .collect();
    Ok(Diagnostics { video_id: video.id.clone(), gates, similarity })
}

/// Mean off-diagonal cosine similarity of the deepest encoder level,
/// averaged over videos.
pub fn deepest_level_similarity(model: &Model, store: &ParamStore, videos: &[Video]) -> Result<f64> {
    let mut total = 0.0;
    for v in videos {
        let pyramid = model.encoder.build_pyramid(store, &v.features)?;
        let deepest = pyramid.levels.last().expect("pyramid has at least one level");
        total += mean_off_diagonal(&similarity_matrix(&deepest.data));
    }
    Ok(total / videos.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let (base, w, n) = (1e-3, 10, 100);
        assert!((learning_rate(base, 0, w, n) - 1e-4).abs() < 1e-18);
        assert_eq!(learning_rate(base, w - 1, w, n), base);
        assert!(learning_rate(base, w, w, n) < base);
        assert!(learning_rate(base, n - 1, w, n).abs() < 1e-18);
        let mid = learning_rate(base, w + 44, w, n);
        assert!((mid - base * 0.5).abs() < 1e-12);
        for s in w..n - 1 {
            assert!(learning_rate(base, s + 1, w, n) <= learning_rate(base, s, w, n));
        }
    }

    #[test]
    fn adamw_first_step_and_decay_flag() {
        let mut store = ParamStore::new();
        let a = store.add("kernel", Tensor::from_rows(&[[1.0, -1.0]]), true);
        let b = store.add("bias", Tensor::from_rows(&[[1.0, -1.0]]), false);
        let mut opt = AdamW::new(&store);
        let grads = vec![Tensor::from_rows(&[[0.5, -2.0]]), Tensor::from_rows(&[[0.5, 0.0]])];
        opt.update(&mut store, &grads, 0.1, 0.5);
        // first step moves by lr·sign(g); decay scales kernels by 1 − lr·wd
        let k = store.get(a).data();
        assert!((k[0] - (0.95 - 0.1)).abs() < 1e-7);
        assert!((k[1] - (-0.95 + 0.1)).abs() < 1e-7);
        let c = store.get(b).data();
        assert!((c[0] - 0.9).abs() < 1e-7);
        assert_eq!(c[1], -1.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::from_rows(&[[3.0]]), Tensor::from_rows(&[[4.0]])];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].data()[0], 3.0);
        clip_grad_norm(&mut g, 1.0);
        let n = (g[0].sq_norm() + g[1].sq_norm()).sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ema_converges_without_updates() {
        let mut p = ParamStore::new();
        let id = p.add("w", Tensor::from_rows(&[[2.0]]), true);
        let mut ema = p.clone();
        ema.set(id, Tensor::from_rows(&[[0.0]]));
        for _ in 0..5000 {
            ema_update(&mut ema, &p, 0.999);
        }
        assert!((ema.get(id).data()[0] - 2.0).abs() < 0.02);
    }

    #[test]
    fn crop_shifts_and_clips_ground_truth() {
        let video = Video {
            id: "v".into(),
            features: Tensor::new(vec![1, 10], (0..10).map(f64::from).collect()).unwrap(),
            duration_s: 10.0,
            feature_stride_s: 1.0,
            segments: vec![Segment::new(1.0, 4.0, 0), Segment::new(6.0, 9.0, 1)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (f, gt) = random_crop(&video, 5, &mut rng).unwrap();
            let off = f.data()[0];
            assert_eq!(f.data(), &[off, off + 1.0, off + 2.0, off + 3.0, off + 4.0]);
            for s in &gt {
                assert!(s.start >= 0.0 && s.end <= 5.0 && s.start < s.end);
            }
        }
        let (f, gt) = random_crop(&video, 20, &mut rng).unwrap();
        assert_eq!(f.cols(), 10);
        assert_eq!(gt.len(), 2);
    }
}
