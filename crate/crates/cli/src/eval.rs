use std::path::{Path, PathBuf};

use avcap::analysis::{bleu4, exact_match, token_accuracy};
use avcap::captioner::strip_eos;
use avcap::checkpoint::load_checkpoint;
use avcap::data::Sample;
use avcap::nn::Graph;
use avcap::train::decode_all;
use avcap::{CaptionBatch, CaptionerModel, Modality, TaskSpec};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, WithPath};
use crate::run::{load_spec, load_split, require, resolve, to_pretty, RunDir};

#[derive(Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// train, val or test.
    #[arg(long)]
    split: Option<String>,
    /// av, a (video zero-masked) or v (audio zero-masked).
    #[arg(long, value_parser = parse_modality)]
    modality: Option<Modality>,
    #[arg(long)]
    beam: Option<usize>,
    /// Greedy decoding; identical to --beam 1.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    greedy: Option<bool>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn parse_modality(s: &str) -> Result<Modality, String> {
    s.parse().map_err(|e: avcap::Error| e.to_string())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub split: String,
    pub modality: Modality,
    pub beam: usize,
    pub greedy: bool,
    pub out: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: PathBuf::new(),
            data: PathBuf::new(),
            split: "test".into(),
            modality: Modality::Av,
            beam: 5,
            greedy: false,
            out: PathBuf::new(),
        }
    }
}

#[derive(Serialize)]
struct Report {
    split: String,
    modality: Modality,
    beam: usize,
    samples: usize,
    bleu4: f64,
    exact_match: f64,
    token_accuracy: f64,
    mean_loss: f64,
}

#[derive(Serialize)]
struct Decoded<'a> {
    index: usize,
    hypothesis: &'a [usize],
    reference: &'a [usize],
    text: String,
}

/// Loads a checkpoint and checks it was trained for this dataset's task.
pub fn load_for(path: &Path, spec: &TaskSpec) -> CliResult<CaptionerModel> {
    require(path, "checkpoint")?;
    let model = load_checkpoint(path).at(path)?;
    let c = model.config();
    if c.vocab != spec.vocab() || c.n_audio != spec.n_audio || c.n_video != spec.n_video {
        return Err(CliError::data(format!(
            "{}: checkpoint expects vocab {:?} with {}+{} tokens, data provides {:?} with {}+{}",
            path.display(),
            c.vocab,
            c.n_audio,
            c.n_video,
            spec.vocab(),
            spec.n_audio,
            spec.n_video
        )));
    }
    Ok(model)
}

/// Token-weighted caption loss through one pathway.
fn mean_loss(model: &CaptionerModel, data: &[Sample], modality: Modality) -> CliResult<f64> {
    let (mut sum, mut tokens) = (0.0, 0usize);
    for chunk in data.chunks(100) {
        let rows: Vec<&Sample> = chunk.iter().collect();
        let batch = CaptionBatch::from_samples(&rows)?;
        let count = batch.caption.iter().filter(|&&t| t != avcap::data::PAD).count();
        let mut g = Graph::new(&model.store, false);
        let l = model.caption_loss(&mut g, &batch, modality)?;
        sum += g.value(l).item() * count as f64;
        tokens += count;
    }
    Ok(sum / tokens as f64)
}

pub fn run(args: EvalArgs) -> CliResult<()> {
    let cfg: EvalConfig = resolve(&args)?;
    if cfg.beam == 0 {
        return Err(CliError::usage("--beam must be at least 1"));
    }
    let spec = load_spec(&cfg.data)?;
    let model = load_for(&cfg.checkpoint, &spec)?;
    let dir = RunDir::create(&cfg.out, "eval", &cfg)?;
    let data = load_split(&cfg.data, &spec, &cfg.split)?;
    let beam = if cfg.greedy { 1 } else { cfg.beam };

    let hyps = decode_all(&model, &data, cfg.modality, beam)?;
    let refs: Vec<Vec<usize>> = data.iter().map(|s| strip_eos(&s.caption).to_vec()).collect();
    let ref_sets: Vec<Vec<Vec<usize>>> = refs.iter().map(|r| vec![r.clone()]).collect();
    let vocab = spec.vocab();
    let mut dump = Vec::new();
    for (i, (h, r)) in hyps.iter().zip(&refs).enumerate() {
        let text = h.iter().map(|&t| vocab.name(t)).collect::<Vec<_>>().join(" ");
        serde_json::to_writer(&mut dump, &Decoded { index: i, hypothesis: h, reference: r, text }).expect("serializes");
        dump.push(b'\n');
    }
    let report = Report {
        split: cfg.split.clone(),
        modality: cfg.modality,
        beam,
        samples: data.len(),
        bleu4: bleu4(&hyps, &ref_sets)?,
        exact_match: exact_match(&hyps, &refs),
        token_accuracy: token_accuracy(&hyps, &refs),
        mean_loss: mean_loss(&model, &data, cfg.modality)?,
    };
    if !report.mean_loss.is_finite() {
        return Err(CliError::numeric(format!("mean loss is {}", report.mean_loss)));
    }
    dir.write("decodes.jsonl", &dump)?;
    dir.write("eval.json", &to_pretty(&report))?;
    println!(
        "{} [{}] BLEU-4 {:.4}  exact {:.4}  token acc {:.4}  loss {:.4}",
        cfg.split, cfg.modality, report.bleu4, report.exact_match, report.token_accuracy, report.mean_loss
    );
    dir.finish()
}
