use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dfa_core::data::{self, SynthConfig};
use dfa_core::detection::Detection;
use dfa_core::evaluation::{map_report, THRESHOLDS_MID};
use dfa_core::gradcheck::{standard_suite, FD_TOLERANCE};
use dfa_core::train::{self, Checkpoint, RunConfig};

#[derive(Parser)]
#[command(name = "dfa", version, about = "Temporal action detection with dynamic feature aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth {
        /// JSON synthetic-set settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; receives features/, train.json and test.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// JSON with optional "model" and "train" sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of epochs (warmup is scaled along).
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect actions with a checkpoint and write detections JSON.
    Infer {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use the raw parameters instead of their moving average.
        #[arg(long)]
        raw_params: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detections against annotations.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Comma-separated tIoU thresholds.
        #[arg(long, value_delimiter = ',', default_values_t = THRESHOLDS_MID.to_vec())]
        thresholds: Vec<f64>,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = FD_TOLERANCE)]
        tolerance: f64,
    },
    /// Write gate traces and feature-similarity matrices.
    DumpDiagnostics {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict to one video.
        #[arg(long)]
        video: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding `<video_id>.bin` feature files.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
}

impl DataArgs {
    fn load(&self, num_classes: Option<usize>) -> Result<Vec<data::Video>> {
        let ann = data::read_annotations(&self.annotations, num_classes)
            .with_context(|| format!("reading {}", self.annotations.display()))?;
        Ok(data::load_videos(&self.features, &ann)?)
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    data::write_json(path, value).with_context(|| format!("writing {}", path.display()))
}

fn synth(config: Option<PathBuf>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let set = data::synth_dataset(&cfg)?;
    let features = out.join("features");
    write_json(&out.join("train.json"), &data::save_videos(&set.train, &features)?)?;
    write_json(&out.join("test.json"), &data::save_videos(&set.test, &features)?)?;
    eprintln!(
        "wrote {} train and {} test videos to {}",
        set.train.len(),
        set.test.len(),
        out.display()
    );
    Ok(())
}

fn run_train(data: &DataArgs, config: Option<PathBuf>, seed: Option<u64>, epochs: Option<usize>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.warmup_epochs = cfg.train.warmup_epochs * e / cfg.train.epochs;
        cfg.train.epochs = e;
    }
    let videos = data.load(Some(cfg.model.num_classes))?;
    let ckpt = train::train(&cfg.model, &cfg.train, &videos, |e| {
        eprintln!(
            "epoch {:>4}  lr {:.3e}  loss {:.5}  cls {:.5}  reg {:.5}  |g| {:.3}",
            e.epoch, e.lr, e.loss, e.cls, e.reg, e.grad_norm
        );
    })?;
    ckpt.save(out)?;
    Ok(())
}

fn infer(data: &DataArgs, checkpoint: &Path, raw: bool, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let videos = data.load(None)?;
    let store = if raw { &ckpt.params } else { &ckpt.ema };
    let dets = train::infer(&ckpt.model, store, &videos)?;
    write_json(out, &dets)
}

fn eval(detections: &Path, annotations: &Path, thresholds: &[f64], out: Option<PathBuf>) -> Result<()> {
    if thresholds.is_empty() {
        bail!("no thresholds given");
    }
    let dets: Vec<Detection> = serde_json::from_str(&std::fs::read_to_string(detections)?)
        .with_context(|| format!("parsing {}", detections.display()))?;
    let ann = data::read_annotations(annotations, None)?;
    let gts: Vec<_> = ann
        .iter()
        .flat_map(|(id, a)| {
            a.annotations.iter().map(move |x| dfa_core::evaluation::GroundTruth {
                video_id: id.clone(),
                start: x.segment[0],
                end: x.segment[1],
                label: x.label,
            })
        })
        .collect();
    let report = map_report(&dets, &gts, thresholds);
    for t in &report.thresholds {
        eprintln!("mAP@{:.2} = {:.4}", t.threshold, t.map);
    }
    eprintln!("average mAP = {:.4}", report.average_map);
    match out {
        Some(p) => write_json(&p, &report),
        None => {
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn gradcheck(tolerance: f64) -> Result<bool> {
    let mut ok = true;
    for r in standard_suite()? {
        let pass = r.passed(tolerance);
        ok &= pass;
        println!(
            "{:<4} {:<32} entries {:>5}  max rel err {:.3e}  ({})",
            if pass { "ok" } else { "FAIL" },
            r.name,
            r.checked,
            r.max_rel_error,
            r.worst
        );
    }
    Ok(ok)
}

fn dump_diagnostics(data: &DataArgs, checkpoint: &Path, video: Option<String>, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let videos = data.load(None)?;
    let selected: Vec<_> = videos
        .iter()
        .filter(|v| video.as_ref().map_or(true, |id| &v.id == id))
        .collect();
    if selected.is_empty() {
        bail!("no matching video");
    }
    let dumps = selected
        .into_iter()
        .map(|v| train::diagnostics(&ckpt.model, &ckpt.ema, v))
        .collect::<dfa_core::Result<Vec<_>>>()?;
    write_json(out, &dumps)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { config, seed, out } => synth(config, seed, &out),
        Command::Train { data, config, seed, epochs, out } => run_train(&data, config, seed, epochs, &out),
        Command::Infer { data, checkpoint, raw_params, out } => infer(&data, &checkpoint, raw_params, &out),
        Command::Eval { detections, annotations, thresholds, out } => eval(&detections, &annotations, &thresholds, out),
        Command::Gradcheck { tolerance } => match gradcheck(tolerance) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("gradient check failed");
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
        Command::DumpDiagnostics { data, checkpoint, video, out } => dump_diagnostics(&data, &checkpoint, video, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
