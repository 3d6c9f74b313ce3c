//! Feature files, annotation files and the synthetic dataset.
//!
//! Feature file layout, all little-endian:
//!
//! ```text
//! "DFT1" | version: u32 = 1 | C: u32 | T: u32 | C·T × f32, channel-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detection::Segment;
use crate::error::{config_err, Error, Result};
use crate::evaluation::GroundTruth;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"DFT1";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_features(f: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * f.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(f.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(f.cols() as u32).to_le_bytes());
    for &v in f.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |reason: String| Error::FeatureFormat { path: path.to_path_buf(), reason };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (c, t) = (word(8) as usize, word(12) as usize);
    if c == 0 || t == 0 {
        return Err(bad(format!("empty feature map {c}×{t}")));
    }
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * c * t {
        return Err(bad(format!(
            "payload is {} bytes, expected {} for {c}×{t}",
            payload.len(),
            4 * c * t
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![c, t], data)
}

pub fn write_features(path: &Path, f: &Tensor) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_features(f))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_features(&bytes, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    /// `[start_s, end_s]`.
    pub segment: [f64; 2],
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub duration_s: f64,
    pub feature_stride_s: f64,
    pub annotations: Vec<Annotation>,
}

/// Annotation JSON: `{video_id: {duration_s, feature_stride_s, annotations}}`.
pub type AnnotationFile = BTreeMap<String, VideoAnnotation>;

pub fn validate_annotation(id: &str, a: &VideoAnnotation, num_classes: Option<usize>) -> Result<()> {
    let bad = |reason: String| Err(Error::Annotation { video_id: id.to_string(), reason });
    if !(a.duration_s > 0.0) || !(a.feature_stride_s > 0.0) {
        return bad("duration and feature stride must be positive".into());
    }
    for ann in &a.annotations {
        let [s, e] = ann.segment;
        if !(0.0 <= s && s < e && e <= a.duration_s) {
            return bad(format!("segment [{s}, {e}] outside [0, {}] or empty", a.duration_s));
        }
        if let Some(n) = num_classes {
            if ann.label >= n {
                return bad(format!("label {} with {n} classes", ann.label));
            }
        }
    }
    Ok(())
}

pub fn read_annotations(path: &Path, num_classes: Option<usize>) -> Result<AnnotationFile> {
    let file: AnnotationFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    for (id, a) in &file {
        validate_annotation(id, a, num_classes)?;
    }
    Ok(file)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// A video with its features and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    /// `[C_feat × T]`.
    pub features: Tensor,
    pub duration_s: f64,
    pub feature_stride_s: f64,
    /// Ground truth in seconds.
    pub segments: Vec<Segment>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.features.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Ground truth in feature-grid units.
    pub fn grid_segments(&self) -> Vec<Segment> {
        self.segments
            .iter()
            .map(|s| Segment::new(s.start / self.feature_stride_s, s.end / self.feature_stride_s, s.label))
            .collect()
    }

    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.segments
            .iter()
            .map(|s| GroundTruth { video_id: self.id.clone(), start: s.start, end: s.end, label: s.label })
            .collect()
    }

    pub fn annotation(&self) -> VideoAnnotation {
        VideoAnnotation {
            duration_s: self.duration_s,
            feature_stride_s: self.feature_stride_s,
            annotations: self
                .segments
                .iter()
                .map(|s| Annotation { segment: [s.start, s.end], label: s.label })
                .collect(),
        }
    }
}

pub fn ground_truth(videos: &[Video]) -> Vec<GroundTruth> {
    videos.iter().flat_map(Video::ground_truth).collect()
}

fn feature_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.bin"))
}

/// Writes `<dir>/<id>.bin` for every video and returns the annotation map.
pub fn save_videos(videos: &[Video], feature_dir: &Path) -> Result<AnnotationFile> {
    fs::create_dir_all(feature_dir)?;
    let mut ann = AnnotationFile::new();
    for v in videos {
        write_features(&feature_path(feature_dir, &v.id), &v.features)?;
        ann.insert(v.id.clone(), v.annotation());
    }
    Ok(ann)
}

/// Loads every annotated video from `<dir>/<id>.bin`.
pub fn load_videos(feature_dir: &Path, annotations: &AnnotationFile) -> Result<Vec<Video>> {
    annotations
        .iter()
        .map(|(id, a)| {
            let features = read_features(&feature_path(feature_dir, id))?;
            Ok(Video {
                id: id.clone(),
                features,
                duration_s: a.duration_s,
                feature_stride_s: a.feature_stride_s,
                segments: a
                    .annotations
                    .iter()
                    .map(|x| Segment::new(x.segment[0], x.segment[1], x.label))
                    .collect(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_train: usize,
    pub num_test: usize,
    pub length: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub noise_level: f64,
    pub feature_stride_s: f64,
    pub min_instance: usize,
    pub max_instance: usize,
    pub max_instances: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_train: 32,
            num_test: 32,
            length: 256,
            num_classes: 3,
            channels: 32,
            noise_level: 0.5,
            feature_stride_s: 0.5,
            min_instance: 8,
            max_instance: 96,
            max_instances: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.channels == 0 || self.length == 0 {
            return config_err("synthetic classes, channels and length must be positive");
        }
        if self.min_instance == 0 || self.min_instance > self.max_instance || self.max_instance > self.length {
            return config_err("instance lengths must satisfy 0 < min <= max <= length");
        }
        if self.max_instances == 0 {
            return config_err("max_instances must be positive");
        }
        if !(self.noise_level >= 0.0) || !(self.feature_stride_s > 0.0) {
            return config_err("noise level must be >= 0 and feature stride > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    /// One `[C]` pattern per class.
    pub patterns: Vec<Vec<f64>>,
    pub train: Vec<Video>,
    pub test: Vec<Video>,
}

/// Gaussian-noise videos with non-overlapping instances, each adding a fixed
/// per-class random vector over its span. Values are rounded to `f32` so that
/// saved and in-memory datasets agree exactly.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let patterns: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| (0..cfg.channels).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let mut make = |prefix: &str, n: usize| -> Vec<Video> {
        (0..n)
            .map(|i| synth_video(&format!("{prefix}_{i:03}"), cfg, &patterns, &mut rng))
            .collect()
    };
    let train = make("train", cfg.num_train);
    let test = make("test", cfg.num_test);
    Ok(SynthDataset { patterns, train, test })
}

fn synth_video(id: &str, cfg: &SynthConfig, patterns: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Video {
    let t = cfg.length;
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let mut data: Vec<f64> = (0..cfg.channels * t)
        .map(|_| cfg.noise_level * noise.sample(rng))
        .collect();

    let wanted = rng.gen_range(1..=cfg.max_instances);
    let mut lengths = Vec::new();
    for _ in 0..wanted {
        let len = rng.gen_range(cfg.min_instance..=cfg.max_instance);
        if lengths.iter().sum::<usize>() + len <= t {
            lengths.push(len);
        }
    }
    if lengths.is_empty() {
        lengths.push(cfg.min_instance);
    }
    // distribute the free frames into len+1 gaps
    let free = t - lengths.iter().sum::<usize>();
    let mut cuts: Vec<usize> = (0..lengths.len()).map(|_| rng.gen_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut segments = Vec::new();
    let mut used = 0;
    for (i, &len) in lengths.iter().enumerate() {
        let start = cuts[i] + used;
        used += len;
        let label = rng.gen_range(0..cfg.num_classes);
        for (ch, &p) in patterns[label].iter().enumerate() {
            for v in &mut data[ch * t + start..ch * t + start + len] {
                *v += p;
            }
        }
        segments.push(Segment::new(
            start as f64 * cfg.feature_stride_s,
            (start + len) as f64 * cfg.feature_stride_s,
            label,
        ));
    }
    segments.sort_by(|a, b| a.start.total_cmp(&b.start));
    for v in &mut data {
        *v = *v as f32 as f64;
    }
    Video {
        id: id.to_string(),
        features: Tensor::new(vec![cfg.channels, t], data).expect("shape matches data"),
        duration_s: t as f64 * cfg.feature_stride_s,
        feature_stride_s: cfg.feature_stride_s,
        segments,
    }
}
