use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use avcap::checkpoint::{load_checkpoint, load_compatible, save_checkpoint};
use avcap::train::{evaluate_losses, METRICS_HEADER};
use avcap::{CaptionerModel, FusionKind, LossTriple, ModelConfig, TaskSpec, TrainConfig, Trainer};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, WithPath};
use crate::run::{load_spec, load_split, parse_switch, require, resolve, RunDir};

/// Model shape flags shared by both training commands.
#[derive(Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionKind>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_hidden: Option<usize>,
    #[arg(long)]
    fusion_layers: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
}

fn parse_fusion(s: &str) -> Result<FusionKind, String> {
    s.parse().map_err(|e: avcap::Error| e.to_string())
}

#[derive(Args, Serialize)]
pub struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[arg(long, value_parser = parse_switch)]
    mbp: Option<bool>,
    #[arg(long, value_parser = parse_switch)]
    pnc: Option<bool>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// With MBP off, measure mono-modal losses every n steps (0 = never).
    #[arg(long)]
    mono_log_every: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub fusion: FusionKind,
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub fusion_layers: usize,
    pub decoder_layers: usize,
    pub mbp: bool,
    pub pnc: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub mono_log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::pretrain();
        PretrainConfig {
            data: PathBuf::new(),
            out: PathBuf::new(),
            fusion: m.fusion,
            dim: m.dim,
            heads: m.heads,
            ffn_hidden: m.ffn_hidden,
            fusion_layers: m.fusion_layers,
            decoder_layers: m.decoder_layers,
            mbp: t.mbp,
            pnc: t.pnc,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup_frac: t.warmup_frac,
            seed: t.seed,
            alpha: t.alpha,
            beta: t.beta,
            mono_log_every: t.mono_log_every,
        }
    }
}

fn model_config(spec: &TaskSpec, c: &PretrainConfig) -> ModelConfig {
    ModelConfig {
        dim: c.dim,
        heads: c.heads,
        ffn_hidden: c.ffn_hidden,
        fusion: c.fusion,
        fusion_layers: c.fusion_layers,
        decoder_layers: c.decoder_layers,
        n_audio: spec.n_audio,
        n_video: spec.n_video,
        max_caption_len: spec.caption_len + 1,
        vocab: spec.vocab(),
    }
}

#[derive(Serialize)]
struct Summary {
    steps: usize,
    final_train_loss: f64,
    val: LossTriple,
    w_a: Option<f64>,
    w_v: Option<f64>,
}

/// Runs the loop, streaming one CSV row per step.
fn train_loop(trainer: &mut Trainer, data: &[avcap::Sample], csv_path: &Path) -> CliResult<f64> {
    let mut csv = BufWriter::new(File::create(csv_path).at(csv_path)?);
    writeln!(csv, "{METRICS_HEADER}").at(csv_path)?;
    let mut last = f64::NAN;
    for _ in 0..trainer.config.steps {
        let m = trainer.train_step(data)?;
        writeln!(csv, "{}", m.csv_row()).at(csv_path)?;
        if !m.loss_av.is_finite() {
            csv.flush().at(csv_path)?;
            return Err(CliError::numeric(format!("loss became {} at step {}", m.loss_av, m.step)));
        }
        last = m.loss_av;
    }
    csv.flush().at(csv_path)?;
    Ok(last)
}

pub fn pretrain(args: PretrainArgs) -> CliResult<()> {
    let cfg: PretrainConfig = resolve(&args)?;
    let spec = load_spec(&cfg.data)?;
    let mcfg = model_config(&spec, &cfg);
    mcfg.validate()?;
    let tcfg = TrainConfig {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        warmup_frac: cfg.warmup_frac,
        seed: cfg.seed,
        mbp: cfg.mbp,
        pnc: cfg.pnc,
        alpha: cfg.alpha,
        beta: cfg.beta,
        mono_log_every: cfg.mono_log_every,
        ..TrainConfig::pretrain()
    };
    tcfg.validate()?;
    let dir = RunDir::create(&cfg.out, "pretrain", &cfg)?;
    let train = load_split(&cfg.data, &spec, "train")?;
    let val = load_split(&cfg.data, &spec, "val")?;

    let model = CaptionerModel::new(mcfg, cfg.seed)?;
    let mut trainer = Trainer::new(model, tcfg, train.len())?;
    let last = train_loop(&mut trainer, &train, &dir.file("metrics.csv"))?;
    save_checkpoint(&trainer.model, dir.path())?;
    let summary = Summary {
        steps: cfg.steps,
        final_train_loss: last,
        val: evaluate_losses(&trainer.model, &val, 100)?,
        w_a: cfg.mbp.then_some(trainer.mbp.w_a),
        w_v: cfg.mbp.then_some(trainer.mbp.w_v),
    };
    dir.json("summary.json", &summary)?;
    println!(
        "pretrained {} steps: val L {:.4} L_a {:.4} L_v {:.4}",
        cfg.steps, summary.val.l, summary.val.l_a, summary.val.l_v
    );
    dir.finish()
}

#[derive(Args, Serialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding model.json and model.bin.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Start from freshly initialized weights instead of a checkpoint.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    from_scratch: Option<bool>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub checkpoint: Option<PathBuf>,
    pub from_scratch: bool,
    pub data: PathBuf,
    pub out: PathBuf,
    /// Unset shape fields follow the checkpoint (or the defaults when
    /// starting from scratch); set ones must match it.
    pub fusion: Option<FusionKind>,
    pub dim: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_hidden: Option<usize>,
    pub fusion_layers: Option<usize>,
    pub decoder_layers: Option<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        let t = TrainConfig::finetune();
        FinetuneConfig {
            checkpoint: None,
            from_scratch: false,
            data: PathBuf::new(),
            out: PathBuf::new(),
            fusion: None,
            dim: None,
            heads: None,
            ffn_hidden: None,
            fusion_layers: None,
            decoder_layers: None,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup_frac: t.warmup_frac,
            seed: t.seed,
        }
    }
}

impl FinetuneConfig {
    fn apply_shape(&self, base: ModelConfig) -> ModelConfig {
        ModelConfig {
            fusion: self.fusion.unwrap_or(base.fusion),
            dim: self.dim.unwrap_or(base.dim),
            heads: self.heads.unwrap_or(base.heads),
            ffn_hidden: self.ffn_hidden.unwrap_or(base.ffn_hidden),
            fusion_layers: self.fusion_layers.unwrap_or(base.fusion_layers),
            decoder_layers: self.decoder_layers.unwrap_or(base.decoder_layers),
            ..base
        }
    }
}

fn with_task(base: ModelConfig, spec: &TaskSpec) -> ModelConfig {
    ModelConfig {
        n_audio: spec.n_audio,
        n_video: spec.n_video,
        max_caption_len: spec.caption_len + 1,
        vocab: spec.vocab(),
        ..base
    }
}

pub fn finetune(args: FinetuneArgs) -> CliResult<()> {
    let cfg: FinetuneConfig = resolve(&args)?;
    let spec = load_spec(&cfg.data)?;
    let model = match (&cfg.checkpoint, cfg.from_scratch) {
        (Some(_), true) => return Err(CliError::usage("--checkpoint and --from-scratch are mutually exclusive")),
        (None, false) => return Err(CliError::usage("fine-tuning needs --checkpoint or --from-scratch")),
        (Some(path), false) => {
            require(path, "checkpoint")?;
            let stored = *load_checkpoint(path).at(path)?.config();
            let expected = with_task(cfg.apply_shape(stored), &spec);
            load_compatible(path, &expected).at(path)?
        }
        (None, true) => {
            let mcfg = with_task(cfg.apply_shape(ModelConfig::default()), &spec);
            mcfg.validate()?;
            CaptionerModel::new(mcfg, cfg.seed)?
        }
    };
    let tcfg = TrainConfig {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        warmup_frac: cfg.warmup_frac,
        seed: cfg.seed,
        ..TrainConfig::finetune()
    };
    tcfg.validate()?;
    let dir = RunDir::create(&cfg.out, "finetune", &cfg)?;
    let train = load_split(&cfg.data, &spec, "train")?;
    let val = load_split(&cfg.data, &spec, "val")?;
    let mut trainer = Trainer::new(model, tcfg, train.len())?;
    let last = train_loop(&mut trainer, &train, &dir.file("metrics.csv"))?;
    save_checkpoint(&trainer.model, dir.path())?;
    let summary = Summary {
        steps: cfg.steps,
        final_train_loss: last,
        val: evaluate_losses(&trainer.model, &val, 100)?,
        w_a: None,
        w_v: None,
    };
    dir.json("summary.json", &summary)?;
    println!("fine-tuned {} steps: val L {:.4}", cfg.steps, summary.val.l);
    dir.finish()
}
