use std::path::PathBuf;

use avcap::analysis::{aggregate_saliency, attention_rollout_steps};
use avcap::tensor::Tensor;
use avcap::{CaptionBatch, Modality};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::eval::{load_for, parse_modality};
use crate::run::{load_spec, load_split, resolve, RunDir};

#[derive(Args, Serialize)]
pub struct RolloutArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// Index of the sample within the split.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, value_parser = parse_modality)]
    modality: Option<Modality>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub split: String,
    pub sample: usize,
    pub modality: Modality,
    pub out: PathBuf,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            checkpoint: PathBuf::new(),
            data: PathBuf::new(),
            split: "test".into(),
            sample: 0,
            modality: Modality::Av,
            out: PathBuf::new(),
        }
    }
}

#[derive(Serialize)]
struct Summary {
    sample: usize,
    modality: Modality,
    layers: usize,
    tokens: usize,
    audio_mass: f64,
    video_mass: f64,
    global_mass: f64,
}

fn matrix_csv(m: &Tensor, labels: &[String]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(std::iter::once("token").chain(labels.iter().map(String::as_str)))?;
    for (i, label) in labels.iter().enumerate() {
        w.write_record(std::iter::once(label.clone()).chain(m.row(i).iter().map(|x| x.to_string())))?;
    }
    w.into_inner().map_err(|e| CliError::data(e.to_string()))
}

pub fn run(args: RolloutArgs) -> CliResult<()> {
    let cfg: RolloutConfig = resolve(&args)?;
    let spec = load_spec(&cfg.data)?;
    let model = load_for(&cfg.checkpoint, &spec)?;
    let dir = RunDir::create(&cfg.out, "rollout", &cfg)?;
    let data = load_split(&cfg.data, &spec, &cfg.split)?;
    let sample = data.get(cfg.sample).ok_or_else(|| {
        CliError::usage(format!("sample {} out of range: the {} split holds {}", cfg.sample, cfg.split, data.len()))
    })?;
    let batch = CaptionBatch::from_samples(&[sample])?;
    let layers = model.attention_maps(&batch, cfg.modality, 0)?;
    let steps = attention_rollout_steps(&layers)?;

    let (n_a, n_v) = (spec.n_audio, spec.n_video);
    let n = layers[0].shape()[0];
    let mut labels: Vec<String> = (0..n_a).map(|i| format!("a{i}")).chain((0..n_v).map(|i| format!("v{i}"))).collect();
    if n == n_a + n_v + 2 {
        labels.extend(["g_a".to_string(), "g_v".to_string()]);
    }
    for (i, (layer, cumulative)) in layers.iter().zip(&steps).enumerate() {
        dir.write(&format!("attention_layer{i}.csv"), &matrix_csv(layer, &labels)?)?;
        dir.write(&format!("rollout_layer{i}.csv"), &matrix_csv(cumulative, &labels)?)?;
    }

    let last = steps.last().expect("at least one fusion layer");
    let rows: Vec<usize> = (0..n).collect();
    let saliency: Vec<f64> = aggregate_saliency(last, &rows)?.into_iter().map(|x| x / n as f64).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["position", "audio_token", "audio_saliency", "video_token", "video_saliency"])?;
    let vocab = spec.vocab();
    for p in 0..n_a.max(n_v) {
        let cell = |present: bool, id: usize, s: f64| {
            if present {
                (vocab.name(id), s.to_string())
            } else {
                (String::new(), String::new())
            }
        };
        let (at, as_) = cell(p < n_a, sample.audio.get(p).copied().unwrap_or(0), saliency.get(p).copied().unwrap_or(0.0));
        let (vt, vs) = cell(p < n_v, sample.video.get(p).copied().unwrap_or(0), saliency.get(n_a + p).copied().unwrap_or(0.0));
        w.write_record([p.to_string(), at, as_, vt, vs])?;
    }
    dir.write("saliency.csv", &w.into_inner().map_err(|e| CliError::data(e.to_string()))?)?;

    let summary = Summary {
        sample: cfg.sample,
        modality: cfg.modality,
        layers: layers.len(),
        tokens: n,
        audio_mass: saliency[..n_a].iter().sum(),
        video_mass: saliency[n_a..n_a + n_v].iter().sum(),
        global_mass: saliency[n_a + n_v..].iter().sum(),
    };
    dir.json("rollout.json", &summary)?;
    println!(
        "rollout over {} layers: audio {:.3}, video {:.3}, global {:.3}",
        summary.layers, summary.audio_mass, summary.video_mass, summary.global_mass
    );
    dir.finish()
}
